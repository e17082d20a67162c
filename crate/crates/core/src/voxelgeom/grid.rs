use serde::{Deserialize, Serialize};

use super::GeomError;

/// Extent of a dense voxel grid. Storage is depth-major: `(d, h, w)` with `w` fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VolumeShape {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl VolumeShape {
    pub fn new(depth: usize, height: usize, width: usize) -> Result<Self, GeomError> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(GeomError::InvalidShape([depth, height, width]));
        }
        Ok(Self {
            depth,
            height,
            width,
        })
    }

    /// Cubic shape with side `n`. Panics if `n == 0`.
    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n).expect("cube side must be positive")
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.height + h) * self.width + w
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let w = idx % self.width;
        let rest = idx / self.width;
        [rest / self.height, rest % self.height, w]
    }

    /// Index of a signed coordinate, or `None` when it falls outside the grid.
    #[inline]
    pub fn checked_index(&self, d: isize, h: isize, w: isize) -> Option<usize> {
        if d < 0 || h < 0 || w < 0 {
            return None;
        }
        let (d, h, w) = (d as usize, h as usize, w as usize);
        if d >= self.depth || h >= self.height || w >= self.width {
            return None;
        }
        Some(self.index(d, h, w))
    }

    pub fn fits_within(&self, outer: &VolumeShape) -> bool {
        self.depth <= outer.depth && self.height <= outer.height && self.width <= outer.width
    }
}

impl std::fmt::Display for VolumeShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

/// Dense scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: VolumeShape,
    data: Vec<T>,
}

/// Image intensities.
pub type Volume = Grid<f32>;

impl<T: Copy> Grid<T> {
    pub fn filled(shape: VolumeShape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: VolumeShape, data: Vec<T>) -> Result<Self, GeomError> {
        if data.len() != shape.len() {
            return Err(GeomError::SizeMismatch {
                expected: shape.len(),
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: VolumeShape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for d in 0..shape.depth {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    data.push(f(d, h, w));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(d, h, w)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, value: T) {
        let idx = self.shape.index(d, h, w);
        self.data[idx] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Copy of the sub-box starting at `origin` with extent `extent`.
    pub fn crop(&self, origin: [usize; 3], extent: VolumeShape) -> Grid<T> {
        let [od, oh, ow] = origin;
        assert!(
            od + extent.depth <= self.shape.depth
                && oh + extent.height <= self.shape.height
                && ow + extent.width <= self.shape.width,
            "crop box exceeds grid"
        );
        let mut data = Vec::with_capacity(extent.len());
        for d in 0..extent.depth {
            for h in 0..extent.height {
                let start = self.shape.index(od + d, oh + h, ow);
                data.extend_from_slice(&self.data[start..start + extent.width]);
            }
        }
        Grid {
            shape: extent,
            data,
        }
    }

    /// Mirror along `axis` (0 = depth, 1 = height, 2 = width).
    pub fn flip(&self, axis: usize) -> Grid<T> {
        let s = self.shape;
        Grid::from_fn(s, |d, h, w| match axis {
            0 => self.get(s.depth - 1 - d, h, w),
            1 => self.get(d, s.height - 1 - h, w),
            _ => self.get(d, h, s.width - 1 - w),
        })
    }
}

/// Dense `{0, 1}` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: VolumeShape,
    voxels: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(shape: VolumeShape) -> Self {
        Self {
            shape,
            voxels: vec![0; shape.len()],
        }
    }

    pub fn full(shape: VolumeShape) -> Self {
        Self {
            shape,
            voxels: vec![1; shape.len()],
        }
    }

    pub fn from_vec(shape: VolumeShape, voxels: Vec<u8>) -> Result<Self, GeomError> {
        if voxels.len() != shape.len() {
            return Err(GeomError::SizeMismatch {
                expected: shape.len(),
                got: voxels.len(),
            });
        }
        if let Some(&bad) = voxels.iter().find(|&&v| v > 1) {
            return Err(GeomError::NonBinary(bad));
        }
        Ok(Self { shape, voxels })
    }

    pub fn from_fn(shape: VolumeShape, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let grid = Grid::from_fn(shape, |d, h, w| f(d, h, w) as u8);
        Self {
            shape,
            voxels: grid.into_vec(),
        }
    }

    pub fn shape(&self) -> VolumeShape {
        self.shape
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> bool {
        self.voxels[self.shape.index(d, h, w)] != 0
    }

    #[inline]
    pub fn get_index(&self, idx: usize) -> bool {
        self.voxels[idx] != 0
    }

    #[inline]
    pub fn set(&mut self, d: usize, h: usize, w: usize, value: bool) {
        let idx = self.shape.index(d, h, w);
        self.voxels[idx] = value as u8;
    }

    #[inline]
    pub fn set_index(&mut self, idx: usize, value: bool) {
        self.voxels[idx] = value as u8;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    pub fn is_full(&self) -> bool {
        self.voxels.iter().all(|&v| v != 0)
    }

    /// Flat indices of foreground voxels in raster order.
    pub fn foreground_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.voxels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.voxels.iter().map(|&v| v as f32).collect()
    }

    pub fn crop(&self, origin: [usize; 3], extent: VolumeShape) -> BinaryMask {
        let grid = Grid::from_vec(self.shape, self.voxels.clone())
            .expect("mask length matches shape")
            .crop(origin, extent);
        BinaryMask {
            shape: extent,
            voxels: grid.into_vec(),
        }
    }

    pub fn flip(&self, axis: usize) -> BinaryMask {
        let grid = Grid::from_vec(self.shape, self.voxels.clone())
            .expect("mask length matches shape")
            .flip(axis);
        BinaryMask {
            shape: self.shape,
            voxels: grid.into_vec(),
        }
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask, GeomError> {
        if self.shape != other.shape {
            return Err(GeomError::ShapeMismatch(self.shape, other.shape));
        }
        let voxels = self
            .voxels
            .iter()
            .zip(&other.voxels)
            .map(|(a, b)| a | b)
            .collect();
        Ok(BinaryMask {
            shape: self.shape,
            voxels,
        })
    }
}

/// Non-negative distances in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub shape: VolumeShape,
    pub values: Vec<f64>,
}

impl DistanceField {
    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.values[self.shape.index(d, h, w)]
    }
}

/// Signed distance to the object surface: negative inside, positive outside, zero on the
/// boundary. Raw maps are in voxels; normalized maps lie in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedDistanceMap {
    pub shape: VolumeShape,
    pub values: Vec<f64>,
    pub normalized: bool,
    /// Set for empty or full masks, which have no surface and get a constant map.
    pub degenerate: bool,
}

impl SignedDistanceMap {
    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.values[self.shape.index(d, h, w)]
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Boundary voxels in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceVoxelSet {
    pub shape: VolumeShape,
    pub coords: Vec<[usize; 3]>,
}

impl SurfaceVoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, coord: [usize; 3]) -> bool {
        self.coords.binary_search_by_key(&self.shape.index(coord[0], coord[1], coord[2]), |c| {
            self.shape.index(c[0], c[1], c[2])
        })
        .is_ok()
    }

    pub fn indicator(&self) -> BinaryMask {
        let mut mask = BinaryMask::empty(self.shape);
        for &[d, h, w] in &self.coords {
            mask.set(d, h, w, true);
        }
        mask
    }
}
