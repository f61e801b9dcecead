//! Hessian-trace sensitivity of parameter blocks, estimated with
//! Hutchinson probes over finite-difference Hessian-vector products.

use serde::Serialize;

use crate::autograd::Tape;
use crate::data::{Cell, Dataset, Report};
use crate::error::{Error, Result};
use crate::models::{Block, Mode, Model, Plain};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Base step of the finite-difference HVP, scaled by `1 + ‖θ‖∞`.
pub const HVP_EPS: f64 = 1e-4;
/// Samples in the fixed calibration batch behind the sensitivity loss.
pub const SENSITIVITY_BATCH: usize = 256;

/// `H·v ≈ (∇L(θ + εv) − ∇L(θ − εv)) / 2ε` with `ε = eps0 · (1 + ‖θ‖∞)`.
/// `grad` maps a flat parameter vector to the flat gradient.
pub fn hvp_fd<G>(grad: &mut G, theta: &[f64], v: &[f64], eps0: f64) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if v.len() != theta.len() {
        return Err(Error::Dimension {
            op: "hvp_fd",
            lhs: vec![theta.len()],
            rhs: vec![v.len()],
        });
    }
    if !(eps0 > 0.0) {
        return Err(Error::contract(format!("hvp step must be positive, got {eps0}")));
    }
    let eps = eps0 * (1.0 + theta.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let shifted = |sign: f64| -> Vec<f64> { theta.iter().zip(v).map(|(t, d)| t + sign * eps * d).collect() };
    let gp = grad(&shifted(1.0))?;
    let gm = grad(&shifted(-1.0))?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(Error::contract("gradient length differs from parameter length"));
    }
    let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    if let Some(bad) = hv.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite Hessian-vector product entry {bad}")));
    }
    Ok(hv)
}

/// Hutchinson estimate of the trace of the Hessian block on the
/// coordinates `block`: the mean of `vᵀHv` over `m` Rademacher probes that
/// are zero off the block. Probes are drawn in order from one generator
/// seeded with `seed`.
pub fn hutchinson_trace<G>(grad: &mut G, theta: &[f64], block: &[usize], m: usize, seed: u64) -> Result<f64>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if block.is_empty() {
        return Err(Error::contract("Hutchinson trace over an empty block"));
    }
    if m == 0 {
        return Err(Error::contract("Hutchinson trace needs at least one probe"));
    }
    if let Some(&i) = block.iter().find(|&&i| i >= theta.len()) {
        return Err(Error::contract(format!("block coordinate {i} outside {} parameters", theta.len())));
    }
    let mut rng = SplitMix64::new(seed);
    let mut v = vec![0.0; theta.len()];
    let mut total = 0.0;
    for _ in 0..m {
        for &i in block {
            v[i] = rng.rademacher();
        }
        let hv = hvp_fd(grad, theta, &v, HVP_EPS)?;
        total += block.iter().map(|&i| v[i] * hv[i]).sum::<f64>();
    }
    Ok(total / m as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    TokenMixing,
    ChannelMixing,
    Other,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::TokenMixing => "token_mixing",
            BlockKind::ChannelMixing => "channel_mixing",
            BlockKind::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub layer: usize,
    pub block: BlockKind,
    pub trace: f64,
    /// Weights and biases of the block.
    pub params: usize,
    pub normalized: f64,
    pub probes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    pub fn to_report(&self) -> Report {
        let mut r = Report::new(&["layer", "block", "trace", "params", "normalized_trace", "probes", "seed"]);
        for row in &self.rows {
            r.push(vec![
                row.layer.into(),
                row.block.as_str().into(),
                Cell::Float(row.trace),
                row.params.into(),
                Cell::Float(row.normalized),
                row.probes.into(),
                row.seed.into(),
            ])
            .expect("row width matches");
        }
        r
    }

    /// Mean normalized trace over the rows of one block kind.
    pub fn mean_normalized(&self, kind: BlockKind) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.block == kind).map(|r| r.normalized).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Seeded batch of at most [`SENSITIVITY_BATCH`] samples.
pub fn sensitivity_batch(data: &Dataset, seed: u64) -> (Tensor, Vec<usize>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    SplitMix64::derive(seed, 0x5E45).shuffle(&mut idx);
    idx.truncate(SENSITIVITY_BATCH);
    data.batch(&idx)
}

/// Flat gradient of the mean cross-entropy of the float model (eval-mode
/// norms) at a flattened parameter vector.
pub fn loss_gradient<'a>(model: &'a Model, images: &'a Tensor, labels: &'a [usize]) -> impl FnMut(&[f64]) -> Result<Vec<f64>> + 'a {
    let shapes: Vec<Vec<usize>> = model.values().iter().map(|t| t.shape().to_vec()).collect();
    let mut work = model.clone();
    move |theta: &[f64]| {
        let mut values = Vec::with_capacity(shapes.len());
        let mut at = 0;
        for s in &shapes {
            let n: usize = s.iter().product();
            values.push(Tensor::new(s.clone(), theta[at..at + n].to_vec())?);
            at += n;
        }
        work.set_values(values)?;
        let mut tape = Tape::new();
        let vars = work.bind(&mut tape);
        let out = work.forward(&mut tape, &vars, images, Mode::Eval, &mut Plain)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        let g = tape.backward(loss)?;
        let mut flat = Vec::with_capacity(theta.len());
        for v in vars {
            flat.extend_from_slice(g.get(v).data());
        }
        if flat.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(flat)
    }
}

/// One row per `(layer, token / channel mixing)` pair: the Hutchinson
/// trace of that block's Hessian on a seeded 256-sample batch of `data`,
/// divided by the block's parameter count.
pub fn block_report(model: &Model, data: &Dataset, m: usize, seed: u64) -> Result<SensitivityReport> {
    let (images, labels) = sensitivity_batch(data, seed);
    let theta: Vec<f64> = model.values().iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut offsets = Vec::with_capacity(model.values().len());
    let mut at = 0;
    for t in model.values() {
        offsets.push(at);
        at += t.len();
    }
    let mut grad = loss_gradient(model, &images, &labels);
    let mut rows = Vec::new();
    for layer in 1..=model.depth() {
        for (block, kind) in [(Block::TokenMixing, BlockKind::TokenMixing), (Block::ChannelMixing, BlockKind::ChannelMixing)] {
            let coords: Vec<usize> = model
                .block_params(layer, block)
                .into_iter()
                .flat_map(|p| offsets[p]..offsets[p] + model.values()[p].len())
                .collect();
            let probe_seed = SplitMix64::derive(seed, (layer * 2 + (kind == BlockKind::ChannelMixing) as usize) as u64).next_u64();
            let trace = hutchinson_trace(&mut grad, &theta, &coords, m, probe_seed)
                .map_err(|e| e.at(format!("layer {layer} {}", kind.as_str())))?;
            rows.push(SensitivityRow {
                layer,
                block: kind,
                trace,
                params: coords.len(),
                normalized: trace / coords.len() as f64,
                probes: m,
                seed,
            });
        }
    }
    Ok(SensitivityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(a: Vec<Vec<f64>>) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
        move |x: &[f64]| Ok(a.iter().map(|row| row.iter().zip(x).map(|(r, v)| r * v).sum()).collect())
    }

    #[test]
    fn hvp_on_quadratic() {
        let mut g = quadratic(vec![vec![2.0, 1.0], vec![1.0, 3.0]]);
        let hv = hvp_fd(&mut g, &[0.3, -0.7], &[1.0, 0.0], HVP_EPS).unwrap();
        assert!((hv[0] - 2.0).abs() < 1e-9 && (hv[1] - 1.0).abs() < 1e-9, "{hv:?}");
        let zero = hvp_fd(&mut g, &[0.3, -0.7], &[0.0, 0.0], HVP_EPS).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(hvp_fd(&mut g, &[0.3], &[1.0, 0.0], HVP_EPS).is_err());
    }

    #[test]
    fn linear_loss_has_no_curvature() {
        let mut g = |_: &[f64]| Ok(vec![1.5, -2.0, 0.25]);
        let hv = hvp_fd(&mut g, &[1.0, 2.0, 3.0], &[1.0, -1.0, 1.0], HVP_EPS).unwrap();
        assert_eq!(hv, vec![0.0; 3]);
    }

    #[test]
    fn diagonal_trace_is_exact_for_any_probe_count() {
        let mut g = quadratic(vec![vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]);
        for m in [1, 2, 7] {
            let t = hutchinson_trace(&mut g, &[0.1, 0.2, 0.3], &[0, 1, 2], m, 42).unwrap();
            assert!((t - 6.0).abs() < 1e-8, "{t}");
        }
        let part = hutchinson_trace(&mut g, &[0.1, 0.2, 0.3], &[2], 3, 1).unwrap();
        assert!((part - 3.0).abs() < 1e-8);
    }

    #[test]
    fn empty_block_is_rejected() {
        let mut g = quadratic(vec![vec![1.0]]);
        assert!(matches!(hutchinson_trace(&mut g, &[0.0], &[], 3, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_loss_gives_zero() {
        let mut g = |x: &[f64]| Ok(vec![0.0; x.len()]);
        assert_eq!(hutchinson_trace(&mut g, &[1.0, 2.0], &[0, 1], 5, 3).unwrap(), 0.0);
    }
}
