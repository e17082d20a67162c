use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_volume, MetricsReport};
use crate::segnet::Segmenter;
use crate::synthdata::read_sample;
use crate::tensor::Tensor;
use crate::voxelgeom::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeFailure {
    pub id: String,
    pub error: String,
}

/// Column means. Surface means skip volumes whose surface metrics are missing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsMean {
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
    pub count: usize,
    pub missing_surface: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub nms_applied: bool,
    pub rows: Vec<MetricsReport>,
    pub failures: Vec<VolumeFailure>,
    pub mean: MetricsMean,
}

impl MetricsTable {
    pub fn from_rows(nms_applied: bool, rows: Vec<MetricsReport>, failures: Vec<VolumeFailure>) -> Self {
        let n = rows.len();
        let mut mean = MetricsMean {
            count: n,
            ..MetricsMean::default()
        };
        if n > 0 {
            mean.dice = rows.iter().map(|r| r.dice).sum::<f64>() / n as f64;
            mean.jaccard = rows.iter().map(|r| r.jaccard).sum::<f64>() / n as f64;
        }
        let surf: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.asd?, r.hd95?))).collect();
        mean.missing_surface = n - surf.len();
        if !surf.is_empty() {
            mean.asd = Some(surf.iter().map(|s| s.0).sum::<f64>() / surf.len() as f64);
            mean.hd95 = Some(surf.iter().map(|s| s.1).sum::<f64>() / surf.len() as f64);
        }
        Self {
            nms_applied,
            rows,
            failures,
            mean,
        }
    }

    /// Tab-separated table: overlap in percent, distances in voxels.
    pub fn to_text(&self) -> String {
        let tag = if self.nms_applied { "on" } else { "off" };
        let dist = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"));
        let mut out = String::from("id\tDice[%]\tJaccard[%]\tASD[voxel]\t95HD[voxel]\tNMS\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.2}\t{:.2}\t{}\t{}\t{tag}",
                r.id,
                100.0 * r.dice,
                100.0 * r.jaccard,
                dist(r.asd),
                dist(r.hd95)
            );
        }
        let m = &self.mean;
        let _ = writeln!(
            out,
            "mean\t{:.2}\t{:.2}\t{}\t{}\t{tag}",
            100.0 * m.dice,
            100.0 * m.jaccard,
            dist(m.asd),
            dist(m.hd95)
        );
        for f in &self.failures {
            let _ = writeln!(out, "# failed {}: {}", f.id, f.error);
        }
        out
    }
}

/// Runs `net` on each listed case under `root` and scores it against the stored mask.
/// Cases that cannot be read or scored are reported in `failures`.
pub fn evaluate_dataset(net: &Segmenter, root: &Path, ids: &[String], apply_nms: bool) -> MetricsTable {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for id in ids {
        let result = read_sample(root, id).map_err(|e| e.to_string()).and_then(|sample| {
            let dims = sample.volume.shape().dims();
            let x = Tensor::from_vec(&[1, 1, dims[0], dims[1], dims[2]], sample.volume.as_slice().to_vec());
            let (prob, _) = net.predict(&x).map_err(|e| e.to_string())?;
            let prob = Grid::from_vec(sample.volume.shape(), prob.into_data()).expect("output matches input shape");
            evaluate_volume(id, &prob, &sample.mask, apply_nms).map_err(|e| e.to_string())
        });
        match result {
            Ok(r) => rows.push(r),
            Err(error) => failures.push(VolumeFailure { id: id.clone(), error }),
        }
    }
    MetricsTable::from_rows(apply_nms, rows, failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, dice: f64, asd: Option<f64>) -> MetricsReport {
        MetricsReport {
            id: id.into(),
            dice,
            jaccard: dice / (2.0 - dice),
            asd,
            hd95: asd.map(|a| 2.0 * a),
            nms_applied: false,
        }
    }

    #[test]
    fn means_skip_missing_surfaces() {
        let t = MetricsTable::from_rows(false, vec![row("a", 0.8, Some(1.0)), row("b", 0.6, None)], vec![]);
        assert!((t.mean.dice - 0.7).abs() < 1e-12);
        assert_eq!(t.mean.asd, Some(1.0));
        assert_eq!(t.mean.hd95, Some(2.0));
        assert_eq!(t.mean.missing_surface, 1);
    }

    #[test]
    fn text_columns() {
        let t = MetricsTable::from_rows(true, vec![row("a", 0.8, Some(1.0))], vec![]);
        let text = t.to_text();
        let header: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
        assert_eq!(header, ["id", "Dice[%]", "Jaccard[%]", "ASD[voxel]", "95HD[voxel]", "NMS"]);
        assert!(text.contains("a\t80.00\t66.67\t1.00\t2.00\ton"));
        assert!(text.lines().any(|l| l.starts_with("mean\t80.00")));
    }
}
