//! Rényi divergences between categorical distributions.
//!
//! `D_alpha(P || Q) = 1/(alpha - 1) * log sum_m p_m^alpha q_m^(1 - alpha)`, in nats,
//! evaluated in the log domain. `alpha -> 1` is the KL divergence and
//! `alpha = 0.5` is `-2 log` of the Bhattacharyya coefficient.
//!
//! Both arguments are floored at [`DivergenceSpec::epsilon_floor`] and
//! renormalized before evaluation, so a zero entry yields a large but finite
//! divergence with finite gradients.

use std::io::{self, Write};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-12;
pub const DEFAULT_KL_SWITCH_TOL: f64 = 1e-9;

const ROW_SUM_TOL: f64 = 1e-9;

/// A batch of categorical distributions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalBatch {
    probs: Tensor,
}

impl CategoricalBatch {
    pub fn new(probs: Tensor) -> Result<Self> {
        let Some((_, m)) = probs.dims2() else {
            return Err(Error::InvalidDistribution(format!(
                "expected a [n, m] matrix, got shape {:?}",
                probs.shape()
            )));
        };
        if m == 0 {
            return Err(Error::InvalidDistribution("zero classes".into()));
        }
        for (i, row) in probs.rows().enumerate() {
            if let Some(bad) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(Error::InvalidDistribution(format!("row {i} has entry {bad}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidDistribution(format!("row {i} sums to {total}")));
            }
        }
        Ok(Self { probs })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }
}

/// Order and numerical guards for a Rényi divergence evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceSpec {
    pub alpha: f64,
    pub epsilon_floor: f64,
    pub kl_switch_tol: f64,
}

impl DivergenceSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        let spec = Self {
            alpha,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            kl_switch_tol: DEFAULT_KL_SWITCH_TOL,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_floor(mut self, epsilon_floor: f64) -> Result<Self> {
        self.epsilon_floor = epsilon_floor;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.epsilon_floor > 0.0 && self.epsilon_floor <= 1e-4) {
            return Err(Error::InvalidConfig {
                field: "epsilon_floor",
                reason: format!("{} is outside (0, 1e-4]", self.epsilon_floor),
            });
        }
        if !(self.kl_switch_tol >= 0.0 && self.kl_switch_tol < 1.0) {
            return Err(Error::InvalidConfig {
                field: "kl_switch_tol",
                reason: format!("{} is outside [0, 1)", self.kl_switch_tol),
            });
        }
        Ok(())
    }

    /// True when `alpha` is close enough to 1 to be evaluated as KL.
    pub fn routes_to_kl(&self) -> bool {
        (self.alpha - 1.0).abs() < self.kl_switch_tol
    }
}

/// Floors row log-probabilities at `log(floor)` and renormalizes each row.
pub fn floor_log_probs(tape: &mut Tape, log_probs: Var, floor: f64) -> Result<Var> {
    let clamped = tape.clamp(log_probs, floor.ln(), f64::INFINITY)?;
    tape.log_softmax(clamped)
}

/// Per-row `D_alpha(P || Q)` on the tape from floored row log-probabilities.
pub fn renyi_on_tape(tape: &mut Tape, lp: Var, lq: Var, spec: &DivergenceSpec) -> Result<Var> {
    spec.validate()?;
    if spec.routes_to_kl() {
        kl_on_tape(tape, lp, lq)
    } else {
        tape.renyi_rows(lp, lq, spec.alpha)
    }
}

/// Per-row `KL(P || Q) = sum_m p_m (log p_m - log q_m)` on the tape.
pub fn kl_on_tape(tape: &mut Tape, lp: Var, lq: Var) -> Result<Var> {
    if tape.shape(lp) != tape.shape(lq) {
        return Err(Error::ShapeMismatch {
            op: "kl",
            lhs: tape.shape(lp).to_vec(),
            rhs: tape.shape(lq).to_vec(),
        });
    }
    let p = tape.exp(lp)?;
    let log_ratio = tape.sub(lp, lq)?;
    let terms = tape.mul(p, log_ratio)?;
    tape.sum(terms, Some(1))
}

/// Mean negative log-likelihood of integer labels under row log-probabilities.
pub fn cross_entropy(tape: &mut Tape, log_probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    let [n, m] = shape[..] else {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len(), 0],
        });
    };
    if labels.len() != n || n == 0 {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let mut mask = vec![0.0; n * m];
    for (i, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: y,
                classes: m,
            });
        }
        mask[i * m + y] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![n, m], mask)?);
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked, None)?;
    tape.scale(total, -1.0 / n as f64)
}

fn leaf_log_probs(tape: &mut Tape, batch: &CategoricalBatch, floor: f64) -> Result<Var> {
    let logs = batch.probs().map(|p| p.max(floor).ln());
    let leaf = tape.constant(logs);
    floor_log_probs(tape, leaf, floor)
}

fn check_pair(p: &CategoricalBatch, q: &CategoricalBatch, op: &'static str) -> Result<()> {
    if p.probs().shape() != q.probs().shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: p.probs().shape().to_vec(),
            rhs: q.probs().shape().to_vec(),
        });
    }
    Ok(())
}

/// Per-row Rényi divergence `D_alpha(p || q)` in nats.
pub fn renyi(p: &CategoricalBatch, q: &CategoricalBatch, spec: &DivergenceSpec) -> Result<Tensor> {
    check_pair(p, q, "renyi")?;
    spec.validate()?;
    let mut tape = Tape::new();
    let lp = leaf_log_probs(&mut tape, p, spec.epsilon_floor)?;
    let lq = leaf_log_probs(&mut tape, q, spec.epsilon_floor)?;
    let out = renyi_on_tape(&mut tape, lp, lq, spec)?;
    Ok(tape.value(out).clone())
}

/// Per-row KL divergence with the same flooring as [`renyi`]; `spec.alpha` is ignored.
pub fn kl(p: &CategoricalBatch, q: &CategoricalBatch, spec: &DivergenceSpec) -> Result<Tensor> {
    check_pair(p, q, "kl")?;
    spec.validate()?;
    let mut tape = Tape::new();
    let lp = leaf_log_probs(&mut tape, p, spec.epsilon_floor)?;
    let lq = leaf_log_probs(&mut tape, q, spec.epsilon_floor)?;
    let out = kl_on_tape(&mut tape, lp, lq)?;
    Ok(tape.value(out).clone())
}

/// `-2 log sum_m sqrt(p_m q_m)` per row, computed directly from floored
/// probabilities. Agrees with `renyi` at `alpha = 0.5`.
pub fn hellinger_check(p: &CategoricalBatch, q: &CategoricalBatch) -> Result<Tensor> {
    check_pair(p, q, "hellinger_check")?;
    let floored = |row: &[f64]| {
        let f: Vec<f64> = row.iter().map(|v| v.max(DEFAULT_EPSILON_FLOOR)).collect();
        let total: f64 = f.iter().sum();
        f.into_iter().map(move |v| v / total)
    };
    let out = p
        .probs()
        .rows()
        .zip(q.probs().rows())
        .map(|(rp, rq)| {
            let bc: f64 = floored(rp).zip(floored(rq)).map(|(a, b)| (a * b).sqrt()).sum();
            -2.0 * bc.ln()
        })
        .collect();
    Ok(Tensor::vector(out))
}

/// Which two-event distribution stays fixed in a divergence curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedSide {
    /// `P = (a, 1 - a)` fixed, `Q = (x, 1 - x)` varies.
    P,
    /// `Q = (a, 1 - a)` fixed, `P = (x, 1 - x)` varies.
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub free_prob: f64,
    pub alpha: f64,
    pub divergence: f64,
}

pub const CURVE_GRID_MIN: f64 = 0.001;
pub const CURVE_GRID_MAX: f64 = 0.999;

/// Evenly spaced free probabilities over `[0.001, 0.999]`.
pub fn curve_grid(points: usize) -> Vec<f64> {
    let steps = (points - 1) as f64;
    (0..points)
        .map(|i| (CURVE_GRID_MIN * (steps - i as f64) + CURVE_GRID_MAX * i as f64) / steps)
        .collect()
}

/// Divergence of two-event distributions over a grid of the free probability.
///
/// Rows are grouped by alpha in the given order. A KL curve (`alpha = 1`)
/// is appended when no requested alpha already routes to KL.
pub fn divergence_curve(fixed: FixedSide, a: f64, alphas: &[f64], grid_points: usize) -> Result<Vec<CurveRow>> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Domain {
            op: "divergence_curve",
            detail: format!("fixed probability {a} is outside (0, 1)"),
        });
    }
    if alphas.is_empty() {
        return Err(Error::Domain {
            op: "divergence_curve",
            detail: "empty alpha list".into(),
        });
    }
    if grid_points < 2 {
        return Err(Error::Domain {
            op: "divergence_curve",
            detail: format!("need at least 2 grid points, got {grid_points}"),
        });
    }
    let mut specs = alphas
        .iter()
        .map(|&alpha| DivergenceSpec::new(alpha))
        .collect::<Result<Vec<_>>>()?;
    if !specs.iter().any(DivergenceSpec::routes_to_kl) {
        specs.push(DivergenceSpec::new(1.0)?);
    }

    let grid = curve_grid(grid_points);
    let fixed_rows = vec![[a, 1.0 - a]; grid.len()];
    let free_rows: Vec<[f64; 2]> = grid.iter().map(|&x| [x, 1.0 - x]).collect();
    let fixed_batch = CategoricalBatch::from_rows(&fixed_rows)?;
    let free_batch = CategoricalBatch::from_rows(&free_rows)?;
    let (p, q) = match fixed {
        FixedSide::P => (&fixed_batch, &free_batch),
        FixedSide::Q => (&free_batch, &fixed_batch),
    };

    let mut rows = Vec::with_capacity(specs.len() * grid.len());
    for spec in &specs {
        let values = renyi(p, q, spec)?;
        rows.extend(
            grid.iter()
                .zip(values.data())
                .map(|(&free_prob, &divergence)| CurveRow {
                    free_prob,
                    alpha: spec.alpha,
                    divergence,
                }),
        );
    }
    Ok(rows)
}

/// Writes curve rows as tab-separated `free_prob`, `alpha`, `divergence`.
pub fn write_curve<W: Write>(rows: &[CurveRow], mut out: W) -> io::Result<()> {
    writeln!(out, "free_prob\talpha\tdivergence")?;
    for row in rows {
        writeln!(out, "{:.6}\t{}\t{:.12e}", row.free_prob, row.alpha, row.divergence)?;
    }
    Ok(())
}

/// Parses a table written by [`write_curve`].
pub fn parse_curve(text: &str) -> Option<Vec<CurveRow>> {
    let mut lines = text.lines();
    lines.next()?;
    lines
        .map(|line| {
            let mut f = line.split('\t');
            let row = CurveRow {
                free_prob: f.next()?.parse().ok()?,
                alpha: f.next()?.parse().ok()?,
                divergence: f.next()?.parse().ok()?,
            };
            f.next().is_none().then_some(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (CategoricalBatch, CategoricalBatch) {
        (
            CategoricalBatch::from_rows(&[[0.5, 0.5]]).unwrap(),
            CategoricalBatch::from_rows(&[[0.4, 0.6]]).unwrap(),
        )
    }

    #[test]
    fn batch_validation() {
        assert!(CategoricalBatch::from_rows(&[[0.5, 0.6]]).is_err());
        assert!(CategoricalBatch::from_rows(&[[-0.1, 1.1]]).is_err());
        assert!(CategoricalBatch::new(Tensor::vector(vec![1.0])).is_err());
        assert!(CategoricalBatch::from_rows(&[[0.0, 1.0]]).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(DivergenceSpec::new(-0.5), Err(Error::InvalidAlpha(_))));
        assert!(DivergenceSpec::new(f64::NAN).is_err());
        assert!(DivergenceSpec::new(2.0).unwrap().with_floor(1e-3).is_err());
        assert!(DivergenceSpec::new(2.0).unwrap().with_floor(0.0).is_err());
        assert!(DivergenceSpec::new(1.0).unwrap().routes_to_kl());
        assert!(!DivergenceSpec::new(1.0 + 1e-6).unwrap().routes_to_kl());
    }

    // Frozen from a 50-digit evaluation of the two-term sums:
    //   alpha=2   log(0.25/0.4 + 0.25/0.6)            = 0.040821994520255...
    //   alpha=0.5 -2 log(sqrt(0.2) + sqrt(0.3))       = 0.010153423432868...
    //   KL        0.5 log(1.25) + 0.5 log(5/6)        = 0.020410997260128...
    const RENYI_2: f64 = 0.040_821_994_520_255_13;
    const RENYI_HALF: f64 = 0.010_153_423_432_867_996;
    const KL_VALUE: f64 = 0.020_410_997_260_127_565;

    #[test]
    fn point_values() {
        let (p, q) = pair();
        let r2 = renyi(&p, &q, &DivergenceSpec::new(2.0).unwrap()).unwrap();
        assert!((r2.data()[0] - RENYI_2).abs() < 1e-14);
        let rh = renyi(&p, &q, &DivergenceSpec::new(0.5).unwrap()).unwrap();
        assert!((rh.data()[0] - RENYI_HALF).abs() < 1e-14);
        let k = kl(&p, &q, &DivergenceSpec::new(1.0).unwrap()).unwrap();
        assert!((k.data()[0] - KL_VALUE).abs() < 1e-14);
        let h = hellinger_check(&p, &q).unwrap();
        assert!((h.data()[0] - RENYI_HALF).abs() < 1e-14);
    }

    #[test]
    fn identical_distributions_have_zero_divergence() {
        let p = CategoricalBatch::from_rows(&[[0.4, 0.6]]).unwrap();
        for alpha in [0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 5.0, 10.0] {
            let d = renyi(&p, &p, &DivergenceSpec::new(alpha).unwrap()).unwrap();
            assert!(d.data()[0].abs() <= 1e-10, "alpha {alpha}: {}", d.data()[0]);
        }
        assert!(hellinger_check(&p, &p).unwrap().data()[0].abs() <= 1e-15);
    }

    #[test]
    fn alpha_one_routes_to_kl() {
        let (p, q) = pair();
        let spec = DivergenceSpec::new(1.0).unwrap();
        assert_eq!(renyi(&p, &q, &spec).unwrap(), kl(&p, &q, &spec).unwrap());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (p, _) = pair();
        let q3 = CategoricalBatch::from_rows(&[[0.2, 0.3, 0.5]]).unwrap();
        let spec = DivergenceSpec::new(2.0).unwrap();
        assert!(matches!(renyi(&p, &q3, &spec), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(kl(&p, &q3, &spec), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(hellinger_check(&p, &q3), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn divergence_grows_without_bound_as_q_hits_zero() {
        let p = CategoricalBatch::from_rows(&[[0.4, 0.6]]).unwrap();
        let spec = DivergenceSpec::new(2.0).unwrap();
        let mut last = 0.0;
        for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
            let q = CategoricalBatch::from_rows(&[[eps, 1.0 - eps]]).unwrap();
            let d = renyi(&p, &q, &spec).unwrap().data()[0];
            assert!(d > last + 1.0, "eps {eps}: {d} vs {last}");
            last = d;
        }
    }

    #[test]
    fn zero_entries_stay_finite_and_floor_matters() {
        let p = CategoricalBatch::from_rows(&[[0.3, 0.7]]).unwrap();
        let q = CategoricalBatch::from_rows(&[[0.0, 1.0]]).unwrap();
        let mut previous = 0.0;
        for floor in [1e-8, 1e-10, 1e-12] {
            let spec = DivergenceSpec::new(1.5).unwrap().with_floor(floor).unwrap();
            let d = renyi(&p, &q, &spec).unwrap().data()[0];
            assert!(d.is_finite());
            assert!(d > previous, "floor {floor}: {d} <= {previous}");
            previous = d;
        }
    }

    #[test]
    fn alpha_zero_is_degenerate() {
        let (p, q) = pair();
        let d = renyi(&p, &q, &DivergenceSpec::new(0.0).unwrap()).unwrap();
        assert!(d.data()[0].abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::from_rows(&[[0.5f64.ln(), 0.5f64.ln()]]).unwrap());
        let ce = cross_entropy(&mut tape, lp, &[0]).unwrap();
        assert!((tape.value(ce).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let rows = [[0.9f64.ln(), 0.1f64.ln()], [0.2f64.ln(), 0.8f64.ln()]];
        let lp = tape.constant(Tensor::from_rows(&rows).unwrap());
        let ce = cross_entropy(&mut tape, lp, &[0, 1]).unwrap();
        // -(ln 0.9 + ln 0.8)/2 = 0.164252033486018...
        assert!((tape.value(ce).data()[0] - 0.164_252_033_486_018_03).abs() < 1e-14);

        let one_hot = tape.constant(Tensor::from_rows(&[[-1000.0, 0.0]]).unwrap());
        let lp = floor_log_probs(&mut tape, one_hot, DEFAULT_EPSILON_FLOOR).unwrap();
        let ce = cross_entropy(&mut tape, lp, &[1]).unwrap();
        assert!(tape.value(ce).data()[0].abs() < 1e-11);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let lp = tape.constant(Tensor::from_rows(&[[0.5f64.ln(), 0.5f64.ln()]]).unwrap());
        assert!(matches!(
            cross_entropy(&mut tape, lp, &[2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2,
                ..
            })
        ));
    }

    #[test]
    fn curve_rejects_bad_inputs() {
        assert!(divergence_curve(FixedSide::Q, 0.0, &[2.0], 10).is_err());
        assert!(divergence_curve(FixedSide::Q, 1.0, &[2.0], 10).is_err());
        assert!(divergence_curve(FixedSide::Q, 0.4, &[], 10).is_err());
    }

    #[test]
    fn curve_grid_endpoints_and_kl_row() {
        let grid = curve_grid(999);
        assert_eq!(grid[0], 0.001);
        assert_eq!(grid[998], 0.999);
        assert!((grid[399] - 0.4).abs() < 1e-15);
        let rows = divergence_curve(FixedSide::Q, 0.4, &[0.5, 2.0], 999).unwrap();
        assert_eq!(rows.len(), 3 * 999);
        assert!(rows.iter().any(|r| r.alpha == 1.0));
        let with_kl = divergence_curve(FixedSide::Q, 0.4, &[1.0, 2.0], 5).unwrap();
        assert_eq!(with_kl.len(), 2 * 5);
    }

    #[test]
    fn curve_point_matches_renyi() {
        // grid of 999 points has step 0.001, so p = 0.5 is index 499
        let rows = divergence_curve(FixedSide::Q, 0.4, &[2.0], 999).unwrap();
        let at_half = rows
            .iter()
            .find(|r| r.alpha == 2.0 && (r.free_prob - 0.5).abs() < 1e-12)
            .unwrap();
        assert!((at_half.divergence - RENYI_2).abs() < 1e-12);
    }

    #[test]
    fn write_curve_format() {
        let rows = [CurveRow {
            free_prob: 0.5,
            alpha: 2.0,
            divergence: 0.25,
        }];
        let mut buf = Vec::new();
        write_curve(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "free_prob\talpha\tdivergence\n0.500000\t2\t2.500000000000e-1\n");
        assert_eq!(parse_curve(&text).unwrap(), rows);
        assert!(parse_curve("free_prob\talpha\tdivergence\n0.5\t2\n").is_none());
    }
}
