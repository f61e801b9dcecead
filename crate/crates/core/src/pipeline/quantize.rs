use super::QuantConfig;
use crate::autograd::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Edge, Hooks, Model, Site};
use crate::quant::{compute_qparams, per_channel_qparams, QuantParams, RangeObserver};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Observers collect activation ranges; nothing is quantized.
    Calibrate,
    /// Fake-quant with qparams fixed at the end of calibration.
    Frozen,
    /// Train-mode passes feed EMA observers, then fake-quant with the
    /// current range. Eval-mode passes only read the observers.
    Qat,
}

/// Activation quantization state of one edge.
#[derive(Clone, Debug)]
pub struct EdgeQuant {
    pub layer: usize,
    pub site: Site,
    pub observer: RangeObserver,
    pub qparams: Option<QuantParams>,
}

/// Hooks that simulate quantization. Weights are fake-quantized per output
/// channel with symmetric qparams taken from their current values;
/// activations per tensor through per-edge observers.
#[derive(Clone, Debug)]
pub struct QuantState {
    config: QuantConfig,
    phase: Phase,
    edges: Vec<EdgeQuant>,
}

impl QuantState {
    pub fn new(config: QuantConfig, phase: Phase) -> Result<Self> {
        config.validate()?;
        Ok(QuantState {
            config,
            phase,
            edges: Vec::new(),
        })
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn edges(&self) -> &[EdgeQuant] {
        &self.edges
    }

    fn new_observer(&self) -> Result<RangeObserver> {
        match self.phase {
            Phase::Qat => RangeObserver::ema(self.config.ema_momentum),
            _ => RangeObserver::new(self.config.observer_kind()),
        }
    }

    fn qparams_of(&self, o: &RangeObserver) -> Result<QuantParams> {
        let (lo, hi) = o.finalize()?;
        compute_qparams(lo, hi, self.config.act_bits, self.config.act_scheme)
    }

    /// Ends calibration: every observer's range becomes frozen qparams.
    pub fn freeze(&mut self) -> Result<()> {
        if self.config.quantizes_activations() && self.edges.is_empty() {
            return Err(Error::contract("freeze called before any calibration pass"));
        }
        for i in 0..self.edges.len() {
            let qp = self.qparams_of(&self.edges[i].observer)?;
            self.edges[i].qparams = Some(qp);
        }
        self.phase = Phase::Frozen;
        Ok(())
    }

    /// Switches to fine-tuning. Each observer restarts as an EMA seeded at
    /// its calibrated range, since percentile tracking is too slow to run
    /// every step.
    pub fn into_qat(mut self) -> Result<Self> {
        for e in &mut self.edges {
            let (lo, hi) = e.observer.finalize()?;
            e.observer = RangeObserver::ema_from(self.config.ema_momentum, lo, hi)?;
            e.qparams = None;
        }
        self.phase = Phase::Qat;
        Ok(self)
    }

    /// `(r_min, r_max)` each edge would quantize with right now.
    pub fn ranges(&self) -> Result<Vec<(f64, f64)>> {
        self.edges.iter().map(|e| e.observer.finalize()).collect()
    }
}

impl Hooks for QuantState {
    fn weight(&mut self, tape: &mut Tape, w: Var, axis: usize) -> Result<Var> {
        if !self.config.quantizes_weights() || self.phase == Phase::Calibrate {
            return Ok(w);
        }
        let qp = per_channel_qparams(tape.value(w), self.config.weight_bits, axis)?;
        tape.fake_quant(w, &qp)
    }

    fn activation(&mut self, tape: &mut Tape, edge: &Edge, x: Var) -> Result<Var> {
        if !self.config.quantizes_activations() {
            return Ok(x);
        }
        let i = edge.index;
        if i > self.edges.len() {
            return Err(Error::contract(format!("edge {i} visited out of order")));
        }
        if i == self.edges.len() {
            if self.phase == Phase::Frozen {
                return Err(Error::contract(format!("edge {i} was never calibrated")));
            }
            self.edges.push(EdgeQuant {
                layer: edge.layer,
                site: edge.site,
                observer: self.new_observer()?,
                qparams: None,
            });
        }
        match self.phase {
            Phase::Calibrate => {
                self.edges[i].observer.observe(tape.value(x).data())?;
                Ok(x)
            }
            Phase::Frozen => {
                let qp = self.edges[i]
                    .qparams
                    .clone()
                    .ok_or_else(|| Error::contract(format!("edge {i} has no frozen qparams")))?;
                tape.fake_quant(x, &qp)
            }
            Phase::Qat => {
                if edge.mode == crate::models::Mode::Train || self.edges[i].observer.sample_count() == 0 {
                    self.edges[i].observer.observe(tape.value(x).data())?;
                }
                let qp = self.qparams_of(&self.edges[i].observer)?;
                tape.fake_quant(x, &qp)
            }
        }
    }
}

/// A model paired with the quantization state it evaluates under.
#[derive(Clone, Debug)]
pub struct QuantizedModel {
    pub model: Model,
    pub quant: QuantState,
}

impl QuantizedModel {
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        self.model.predict(images, &mut self.quant.clone())
    }

    /// Turns a calibrated model into one ready for fake-quant fine-tuning.
    pub fn into_qat(self) -> Result<QuantizedModel> {
        Ok(QuantizedModel {
            model: self.model,
            quant: self.quant.into_qat()?,
        })
    }
}

/// Attaches fake-quant to a model for training. Observers start on the
/// first training batch.
pub fn insert_fake_quant(model: Model, qc: &QuantConfig) -> Result<QuantizedModel> {
    Ok(QuantizedModel {
        model,
        quant: QuantState::new(qc.clone(), Phase::Qat)?,
    })
}

/// Post-training quantization. Runs the first
/// `calib_batches × calib_batch_size` samples of `calib` in order through
/// the model, then freezes activation qparams.
pub fn calibrate_ptq(model: &Model, calib: &Dataset, qc: &QuantConfig) -> Result<QuantizedModel> {
    if calib.is_empty() {
        return Err(Error::contract("calibration set is empty"));
    }
    let mut state = QuantState::new(qc.clone(), Phase::Calibrate)?;
    let n = calib.len().min(qc.calib_batches * qc.calib_batch_size);
    let subset = calib.slice(0, n);
    for (images, _) in subset.batches(qc.calib_batch_size) {
        model.predict(&images, &mut state)?;
    }
    state.freeze()?;
    Ok(QuantizedModel {
        model: model.clone(),
        quant: state,
    })
}
