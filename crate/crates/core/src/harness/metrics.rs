//! Metrics rows and their CSV form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Result;

/// One row per evaluation cadence. Column order is the field order; absent
/// loss components are written as 0 so no cell is ever empty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss_total: f64,
    pub loss_dyn: f64,
    pub loss_image: f64,
    pub loss_vector_proprio: f64,
    pub loss_vector_goal: f64,
    pub loss_obj_mask: f64,
    pub loss_obj_rgb: f64,
    pub loss_obj_pos: f64,
    pub loss_pos_encoder: f64,
    pub loss_reward: f64,
    /// Mean L2 distance between decoded and true goal positions.
    pub goal_recon_error: f64,
    /// Mean L2 distance between decoded and true positions of the placed entity.
    pub object_recon_error: f64,
    pub eval_score: f64,
    pub eval_success: f64,
    pub value_mean: f64,
    pub policy_entropy: f64,
    pub value_loss: f64,
    pub imagined_reward: f64,
    pub imagined_return: f64,
    pub actor_grad_norm: f64,
}

impl MetricsRow {
    pub const COLUMNS: [&'static str; 21] = [
        "step",
        "loss_total",
        "loss_dyn",
        "loss_image",
        "loss_vector_proprio",
        "loss_vector_goal",
        "loss_obj_mask",
        "loss_obj_rgb",
        "loss_obj_pos",
        "loss_pos_encoder",
        "loss_reward",
        "goal_recon_error",
        "object_recon_error",
        "eval_score",
        "eval_success",
        "value_mean",
        "policy_entropy",
        "value_loss",
        "imagined_reward",
        "imagined_return",
        "actor_grad_norm",
    ];
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(MetricsRow::COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

/// Writes any serializable rows as CSV with a header.
pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<V: Serialize + ?Sized>(path: impl AsRef<Path>, value: &V) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Ranks with ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson on tie-averaged ranks). NaN when
/// either side is constant or fewer than two pairs are given.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_maps() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up: Vec<f64> = x.iter().map(|v: &f64| v.exp()).collect();
        let down: Vec<f64> = x.iter().map(|v| -v * v).collect();
        assert!((spearman(&x, &up) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &down) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_matches_rank_formula_without_ties() {
        // 1 - 6 Σd² / (n(n²-1))
        let x = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0];
        let y = [2.0, 7.0, 1.0, 8.0, 2.5, 0.5];
        let (rx, ry) = (ranks(&x), ranks(&y));
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
        let expected = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((spearman(&x, &y) - expected).abs() < 1e-12);
    }

    #[test]
    fn ties_share_mean_rank() {
        assert_eq!(ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn metrics_round_trip_with_fixed_header() {
        let dir = std::env::temp_dir().join(format!("wmlab-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        let rows: Vec<MetricsRow> = (1..=3).map(|i| MetricsRow { step: i * 10, loss_total: i as f64 / 3.0, ..Default::default() }).collect();
        write_metrics(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), MetricsRow::COLUMNS.join(","));
        assert_eq!(text.lines().count(), 4);
        assert_eq!(read_metrics(&path).unwrap(), rows);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
