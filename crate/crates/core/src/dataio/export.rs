use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::matching::{MultiMatching, PairwiseSet, PartialPermutation};

use super::{io_err, DataError};

/// Deformed geometry of one instance, for export alongside the static
/// universe points.
#[derive(Debug, Clone)]
pub struct DeformedInstanceGeometry {
    pub instance_id: String,
    pub points: Vec<[f64; 3]>,
}

fn write_ply(path: &Path, points: &[[f64; 3]]) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", points.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in points {
        // f64 Display round-trips exactly.
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[derive(Serialize)]
struct GeometrySummary<'a> {
    category: &'a str,
    universe_size: usize,
    universe_file: String,
    instances: Vec<InstanceSummary>,
}

#[derive(Serialize)]
struct InstanceSummary {
    id: String,
    file: String,
    offset_frobenius_norm: f64,
}

/// Writes the static universe point cloud, one deformed cloud per instance
/// and a JSON summary with per-instance offset norms. Returns the written
/// paths.
pub fn export_geometry(
    category: &str,
    universe: &[[f64; 3]],
    deformed: &[DeformedInstanceGeometry],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, DataError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut written = Vec::new();

    let universe_file = format!("universe_{category}.ply");
    let universe_path = out_dir.join(&universe_file);
    write_ply(&universe_path, universe)?;
    written.push(universe_path);

    let mut instances = Vec::with_capacity(deformed.len());
    for inst in deformed {
        let file = format!("deformed_{category}_{}.ply", inst.instance_id);
        let path = out_dir.join(&file);
        write_ply(&path, &inst.points)?;
        let norm = inst
            .points
            .iter()
            .zip(universe)
            .map(|(a, b)| {
                (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        instances.push(InstanceSummary {
            id: inst.instance_id.clone(),
            file,
            offset_frobenius_norm: norm,
        });
        written.push(path);
    }

    let summary = GeometrySummary {
        category,
        universe_size: universe.len(),
        universe_file,
        instances,
    };
    let summary_path = out_dir.join(format!("geometry_{category}.json"));
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| io_err(&summary_path, e))?;
    written.push(summary_path);
    Ok(written)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingsFile {
    pub version: u32,
    pub universe_size: usize,
    pub instances: Vec<InstanceMatching>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairwise: Option<Vec<PairwiseRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMatching {
    pub id: String,
    /// `(keypoint index, universe index)` per keypoint row.
    pub assignments: Vec<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairwiseRecord {
    pub j: String,
    pub k: String,
    /// Matched keypoint index pairs between instance `j` and instance `k`.
    pub matches: Vec<(usize, usize)>,
}

/// Exports per-instance universe assignments, optionally with the composed
/// pairwise matchings; round-trips losslessly through [`load_matchings`].
pub fn export_matchings(
    multi: &MultiMatching,
    include_pairwise: bool,
    path: &Path,
) -> Result<(), DataError> {
    let universe_size = multi.matchings().first().map(|m| m.d()).unwrap_or(0);
    let instances = multi
        .ids()
        .iter()
        .zip(multi.matchings())
        .map(|(id, m)| InstanceMatching {
            id: id.clone(),
            assignments: m
                .columns()
                .iter()
                .enumerate()
                .map(|(kp, &uni)| (kp, uni))
                .collect(),
        })
        .collect();

    let pairwise = if include_pairwise && multi.len() > 1 {
        let set = PairwiseSet::compose_all(multi).map_err(|e| DataError::Invariant(e.to_string()))?;
        let mut records = Vec::new();
        for j in 0..multi.len() {
            for k in j + 1..multi.len() {
                let m = set.get(j, k);
                let mut matches = Vec::new();
                for a in 0..m.rows() {
                    for b in 0..m.cols() {
                        if m.get(a, b) {
                            matches.push((a, b));
                        }
                    }
                }
                records.push(PairwiseRecord {
                    j: multi.ids()[j].clone(),
                    k: multi.ids()[k].clone(),
                    matches,
                });
            }
        }
        Some(records)
    } else {
        None
    };

    let file = MatchingsFile {
        version: 1,
        universe_size,
        instances,
        pairwise,
    };
    let mut out = serde_json::to_string_pretty(&file).expect("matchings serialize");
    out.push('\n');
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

/// Reads a matchings export back into a [`MultiMatching`].
pub fn load_matchings(path: &Path) -> Result<MultiMatching, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file: MatchingsFile = serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if file.version != 1 {
        return Err(DataError::VersionMismatch {
            found: file.version.to_string(),
            supported: "1".into(),
        });
    }
    let entries = file
        .instances
        .iter()
        .map(|inst| {
            let mut cols = vec![0usize; inst.assignments.len()];
            for &(kp, uni) in &inst.assignments {
                if kp >= cols.len() {
                    return Err(DataError::Invariant(format!(
                        "instance '{}' assignment row {kp} out of range",
                        inst.id
                    )));
                }
                cols[kp] = uni;
            }
            let perm = PartialPermutation::new(cols, file.universe_size)
                .map_err(|e| DataError::Invariant(format!("instance '{}': {e}", inst.id)))?;
            Ok((inst.id.clone(), perm))
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    MultiMatching::new(entries).map_err(|e| DataError::Invariant(e.to_string()))
}
