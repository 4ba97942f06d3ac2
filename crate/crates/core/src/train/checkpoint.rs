//! Checkpoint files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic     "W4CK"
//! version   u32 = 1
//! config    u32 length + UTF-8 TOML of the run configuration
//! count     u32 number of tensors
//! tensors   name (u16 length + UTF-8), u8 rank, u32 dims[rank], f32 data
//!           weights first, then "adam.m.<name>" and "adam.v.<name>"
//! scalars   u64 adam step, f64 beta1, f64 beta2, f64 adam eps,
//!           f64 lr, f64 best metric, u32 stale epochs, u8 stopped,
//!           f64 decay factor, u32 decay patience, u32 stop patience,
//!           f64 metric, u64 epoch, u64 seed
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::config::RunConfig;
use super::scheduler::SchedulerState;
use crate::data::{
    read_exact, read_f32s, read_f64, read_name, read_u32, read_u64, read_u8, u32_of, write_f32s,
    write_name,
};
use crate::error::{Error, Result};
use crate::model::EncoderForecaster;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"W4CK";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub weights: Vec<(String, Tensor<f32>)>,
    pub adam: AdamState<f32>,
    pub scheduler: SchedulerState,
    /// Validation metric of these weights; NaN before the first epoch.
    pub metric: f64,
    /// Completed epochs.
    pub epoch: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        model: &EncoderForecaster<f32>,
        adam: &AdamState<f32>,
        scheduler: &SchedulerState,
        metric: f64,
        epoch: u64,
    ) -> Self {
        Self {
            config: config.clone(),
            weights: model.params().named(),
            adam: adam.clone(),
            scheduler: scheduler.clone(),
            metric,
            epoch,
            seed: config.train.seed,
        }
    }

    /// Copy the weights into `model`, which must have the same tensor names and shapes.
    pub fn restore_into(&self, model: &mut EncoderForecaster<f32>) -> Result<()> {
        model.params_mut().assign(&self.weights)
    }

    /// Rebuild the model described by the stored configuration.
    pub fn build_model(&self) -> Result<EncoderForecaster<f32>> {
        let mut m = EncoderForecaster::build(&self.config.model, self.seed)?;
        self.restore_into(&mut m)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.weights.len();
        if self.adam.m.len() != n || self.adam.v.len() != n {
            return Err(Error::Shape(format!(
                "checkpoint has {n} weights but {} / {} moment tensors",
                self.adam.m.len(),
                self.adam.v.len()
            )));
        }
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let cfg = self.config.to_toml();
        w.write_all(&u32_of(cfg.len())?.to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&u32_of(3 * n)?.to_le_bytes())?;
        for (name, t) in &self.weights {
            write_tensor(w, name, t)?;
        }
        for (prefix, set) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for ((name, _), t) in self.weights.iter().zip(set) {
                write_tensor(w, &format!("{prefix}{name}"), t)?;
            }
        }
        let a = &self.adam;
        let s = &self.scheduler;
        w.write_all(&a.t.to_le_bytes())?;
        for v in [a.beta1, a.beta2, a.eps, s.lr, s.best_metric] {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        w.write_all(&s.epochs_since_improvement.to_le_bytes())?;
        w.write_all(&[s.stopped as u8])?;
        w.write_all(&s.decay_factor.to_bits().to_le_bytes())?;
        w.write_all(&s.patience_decay.to_le_bytes())?;
        w.write_all(&s.patience_stop.to_le_bytes())?;
        w.write_all(&self.metric.to_bits().to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::read_from(&mut BufReader::new(f))
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let len = read_u32(r)? as usize;
        let mut cfg = vec![0u8; len];
        read_exact(r, &mut cfg)?;
        let cfg = String::from_utf8(cfg)
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let config = RunConfig::from_toml_str(&cfg)?;

        let count = read_u32(r)? as usize;
        if !count.is_multiple_of(3) {
            return Err(Error::Format(format!("checkpoint tensor count {count} is not 3·n")));
        }
        let n = count / 3;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push(read_tensor(r)?);
        }
        let mut moments = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for (prefix, set) in [ADAM_M, ADAM_V].iter().zip(moments.iter_mut()) {
            for (name, wt) in &weights {
                let (mname, t) = read_tensor(r)?;
                if mname != format!("{prefix}{name}") || t.shape() != wt.shape() {
                    return Err(Error::Format(format!(
                        "expected moment '{prefix}{name}' {:?}, found '{mname}' {:?}",
                        wt.shape(),
                        t.shape()
                    )));
                }
                set.push(t);
            }
        }
        let [m, v] = moments;
        let t = read_u64(r)?;
        let beta1 = read_f64(r)?;
        let beta2 = read_f64(r)?;
        let eps = read_f64(r)?;
        let lr = read_f64(r)?;
        let best_metric = read_f64(r)?;
        let epochs_since_improvement = read_u32(r)?;
        let stopped = match read_u8(r)? {
            0 => false,
            1 => true,
            b => return Err(Error::Format(format!("bad stopped flag {b}"))),
        };
        let decay_factor = read_f64(r)?;
        let patience_decay = read_u32(r)?;
        let patience_stop = read_u32(r)?;
        let metric = read_f64(r)?;
        let epoch = read_u64(r)?;
        let seed = read_u64(r)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            config,
            weights,
            adam: AdamState {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            },
            scheduler: SchedulerState {
                best_metric,
                epochs_since_improvement,
                lr,
                stopped,
                decay_factor,
                patience_decay,
                patience_stop,
            },
            metric,
            epoch,
            seed,
        })
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    write_name(w, name)?;
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::Format(format!("tensor '{name}' has rank {}", t.rank())))?;
    w.write_all(&[rank])?;
    for &d in t.shape() {
        w.write_all(&u32_of(d)?.to_le_bytes())?;
    }
    write_f32s(w, t.data())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor<f32>)> {
    let name = read_name(r)?;
    let rank = read_u8(r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor '{name}' size overflows")))?;
    let data = read_f32s(r, n)?;
    Ok((name, Tensor::new(&shape, data)?))
}
