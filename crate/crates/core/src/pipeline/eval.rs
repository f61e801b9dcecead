use crate::autograd::{Tape, Var};
use crate::data::{Cell, Dataset, Report};
use crate::error::{Error, Result};
use crate::models::{Edge, Hooks, Model, Site};
use crate::quant::RangeObserver;

const EVAL_BATCH: usize = 128;

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn predict_range<H: Hooks + Clone>(model: &Model, hooks: &H, data: &Dataset, start: usize, end: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(end - start);
    let mut b = start;
    while b < end {
        let e = (b + EVAL_BATCH).min(end);
        let idx: Vec<usize> = (b..e).collect();
        let (images, _) = data.batch(&idx);
        let logits = model.predict(&images, &mut hooks.clone())?;
        let k = logits.shape()[1];
        out.extend(logits.data().chunks(k).map(argmax));
        b = e;
    }
    Ok(out)
}

/// Predicted class of every sample. `threads` workers each take a
/// contiguous shard; the result does not depend on the thread count.
pub fn predictions<H: Hooks + Clone + Send + Sync>(model: &Model, hooks: &H, data: &Dataset, threads: usize) -> Result<Vec<usize>> {
    let n = data.len();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return predict_range(model, hooks, data, 0, n);
    }
    let shard = n.div_ceil(threads);
    let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let (a, b) = ((t * shard).min(n), ((t + 1) * shard).min(n));
                s.spawn(move || predict_range(model, hooks, data, a, b))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Top-1 accuracy as a fraction.
pub fn evaluate<H: Hooks + Clone + Send + Sync>(model: &Model, hooks: &H, data: &Dataset, threads: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let pred = predictions(model, hooks, data, threads)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Range statistics of one activation edge.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationProfile {
    pub edge: usize,
    pub layer: usize,
    pub site: Site,
    /// `100 · layer / (depth + 1)`.
    pub position: f64,
    pub max_abs: f64,
    /// `p`-quantile of `|x|`, from a histogram, so within one bin width.
    pub quantile: f64,
}

impl ActivationProfile {
    pub fn report(rows: &[ActivationProfile]) -> Report {
        let mut r = Report::new(&["edge", "layer", "site", "position_pct", "max_abs", "quantile_abs"]);
        for p in rows {
            r.push(vec![
                p.edge.into(),
                p.layer.into(),
                p.site.as_str().into(),
                Cell::Float(p.position),
                Cell::Float(p.max_abs),
                Cell::Float(p.quantile),
            ])
            .expect("row width matches");
        }
        r
    }
}

struct Profiler<'a, H> {
    inner: &'a mut H,
    p: f64,
    edges: Vec<(Edge, RangeObserver, f64)>,
}

impl<H: Hooks> Hooks for Profiler<'_, H> {
    fn weight(&mut self, tape: &mut Tape, w: Var, axis: usize) -> Result<Var> {
        self.inner.weight(tape, w, axis)
    }

    fn activation(&mut self, tape: &mut Tape, edge: &Edge, x: Var) -> Result<Var> {
        let y = self.inner.activation(tape, edge, x)?;
        let abs: Vec<f64> = tape.value(x).data().iter().map(|v| v.abs()).collect();
        if edge.index == self.edges.len() {
            self.edges.push((*edge, RangeObserver::percentile(self.p)?, 0.0));
        }
        let slot = &mut self.edges[edge.index];
        slot.1.observe(&abs)?;
        slot.2 = abs.iter().fold(slot.2, |m, &v| m.max(v));
        Ok(y)
    }
}

/// Per-edge `max |x|` and `p`-quantile of `|x|` over `data`, measured on
/// the values entering each edge. `hooks` lets a quantized model be
/// profiled; pass [`crate::models::Plain`] for the float model.
pub fn profile_activations<H: Hooks + Clone>(
    model: &Model,
    hooks: &H,
    data: &Dataset,
    p: f64,
) -> Result<Vec<ActivationProfile>> {
    let mut inner = hooks.clone();
    let mut prof = Profiler {
        inner: &mut inner,
        p,
        edges: Vec::new(),
    };
    for (images, _) in data.batches(EVAL_BATCH) {
        model.predict(&images, &mut prof)?;
    }
    let span = (model.depth() + 1) as f64;
    prof.edges
        .into_iter()
        .map(|(e, o, max_abs)| {
            let quantile = if max_abs == 0.0 { 0.0 } else { o.finalize()?.1 };
            Ok(ActivationProfile {
                edge: e.index,
                layer: e.layer,
                site: e.site,
                position: 100.0 * e.layer as f64 / span,
                max_abs,
                quantile,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use crate::models::{ModelConfig, Plain};
    use crate::tensor::Tensor;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0; 5]), 0);
    }

    fn zero_model(cfg: &ModelConfig) -> Model {
        let mut m = Model::new(cfg, 0).unwrap();
        let z: Vec<Tensor> = m.values().iter().map(|v| Tensor::zeros(v.shape())).collect();
        m.set_values(z).unwrap();
        m
    }

    #[test]
    fn constant_logit_model_scores_class_frequency() {
        let cfg = ModelConfig {
            depth: 1,
            ..Default::default()
        };
        let mut m = zero_model(&cfg);
        let mut b = vec![0.0; 10];
        b[3] = 1.0;
        m.set_param("head.bias", Tensor::vector(b)).unwrap();
        let data = synth_dataset(2, 100, 10, 8, 8).unwrap();
        assert_eq!(evaluate(&m, &Plain, &data, 1).unwrap(), 0.1);
        assert_eq!(evaluate(&m, &Plain, &data, 3).unwrap(), 0.1);
    }

    #[test]
    fn thread_count_does_not_change_predictions() {
        let cfg = ModelConfig {
            depth: 1,
            init_std: 0.3,
            ..Default::default()
        };
        let m = Model::new(&cfg, 9).unwrap();
        let data = synth_dataset(2, 301, 10, 8, 8).unwrap();
        let one = predictions(&m, &Plain, &data, 1).unwrap();
        assert_eq!(one, predictions(&m, &Plain, &data, 4).unwrap());
        assert!(evaluate(&m, &Plain, &data.slice(0, 0), 1).is_err());
    }

    #[test]
    fn zero_weights_profile_to_zero() {
        let cfg = ModelConfig {
            depth: 2,
            norm: crate::models::NormKind::Affine,
            ..Default::default()
        };
        let mut m = zero_model(&cfg);
        // affine gamma zero keeps everything at zero
        let data = synth_dataset(2, 20, 10, 8, 8).unwrap();
        let prof = profile_activations(&m, &Plain, &data, 0.99).unwrap();
        assert!(prof.iter().all(|p| p.max_abs == 0.0 && p.quantile == 0.0));
        assert_eq!(prof.first().unwrap().site, Site::Embed);
        assert_eq!(prof.last().unwrap().position, 100.0);
        m.set_param("embed.bias", Tensor::full(&[32], 10.0)).unwrap();
        let prof = profile_activations(&m, &Plain, &data, 0.99).unwrap();
        assert_eq!(prof[0].max_abs, 10.0);
        assert!((prof[0].quantile - 10.0).abs() <= 10.0 / 1024.0 + 1e-12);
    }
}
