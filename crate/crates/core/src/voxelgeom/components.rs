use super::{BinaryMask, VolumeShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Connectivity {
    /// Shared face.
    Face6,
    /// Shared face or edge.
    Edge18,
    /// Shared face, edge or corner.
    Corner26,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Self::Face6),
            18 => Some(Self::Edge18),
            26 => Some(Self::Corner26),
            _ => None,
        }
    }

    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Self::Face6 => 1,
            Self::Edge18 => 2,
            Self::Corner26 => 3,
        };
        let mut out = Vec::with_capacity(26);
        for d in -1..=1isize {
            for h in -1..=1isize {
                for w in -1..=1isize {
                    let nonzero = [d, h, w].iter().filter(|&&x| x != 0).count();
                    if nonzero > 0 && nonzero <= max_nonzero {
                        out.push([d, h, w]);
                    }
                }
            }
        }
        out
    }
}

/// Component labelling of a mask. Label 0 is background; components are numbered from 1
/// in raster order of their first voxel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabels {
    pub shape: VolumeShape,
    pub labels: Vec<u32>,
    /// `sizes[k]` is the voxel count of label `k + 1`.
    pub sizes: Vec<usize>,
}

impl ComponentLabels {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn mask_of(&self, label: u32) -> BinaryMask {
        let voxels = self.labels.iter().map(|&l| (l == label) as u8).collect();
        BinaryMask::from_vec(self.shape, voxels).expect("labels match shape")
    }
}

pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentLabels {
    let shape = mask.shape();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; shape.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();

    for seed in 0..shape.len() {
        if !mask.get_index(seed) || labels[seed] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[seed] = label;
        stack.push(seed);
        let mut size = 0;
        while let Some(idx) = stack.pop() {
            size += 1;
            let [d, h, w] = shape.coords(idx);
            for o in &offsets {
                let Some(n) =
                    shape.checked_index(d as isize + o[0], h as isize + o[1], w as isize + o[2])
                else {
                    continue;
                };
                if mask.get_index(n) && labels[n] == 0 {
                    labels[n] = label;
                    stack.push(n);
                }
            }
        }
        sizes.push(size);
    }
    ComponentLabels {
        shape,
        labels,
        sizes,
    }
}

/// Keeps only the largest 26-connected component. Ties go to the component found first
/// in raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let cc = connected_components(mask, Connectivity::Corner26);
    let mut best: Option<(usize, usize)> = None;
    for (k, &size) in cc.sizes.iter().enumerate() {
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((k, size));
        }
    }
    match best {
        Some((k, _)) => cc.mask_of(k as u32 + 1),
        None => BinaryMask::empty(mask.shape()),
    }
}
