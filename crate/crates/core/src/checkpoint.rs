//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "EHSG"  u32 version
//! u32 gaussians  u32 basis  u32 lifecycle  u32 regions  u32 has_optimizer
//! f32 tensors    cloud then field, in `params::TENSOR_NAMES` order
//! mask           u32 width height grid_n next_update_iter next_id
//!                f64 interval last_update_loss (NaN when absent)
//!                f64 delta1 delta2 delta3  u32 min_side  u32 switch bits
//!                f64 factor_min factor_max
//!                per region: u32 id x0 y0 x1 y1 status depth, f64 static_baseline
//! optimizer      u64 step, f64 beta1 beta2 eps, f32 first moments, f32 second moments
//! ```

use std::path::Path;

use crate::data::depth::{read_bytes, write_atomic};
use crate::deform::{init_field, LifecycleMode};
use crate::error::{Error, Result};
use crate::motion::{MaskSettings, MotionMask, Rect, Region, RegionStatus};
use crate::params::{Model, ParamTensors};
use crate::scene::GaussianCloud;
use crate::train::adam::{AdamSettings, OptimizerState};

pub const MAGIC: &[u8; 4] = b"EHSG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub mask: MotionMask,
    pub optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
        self.u32(v);
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        )))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn fill(&mut self, dst: &mut [f64]) -> Result<()> {
        for d in dst {
            *d = self.f32()?;
        }
        Ok(())
    }
}

fn switch_bits(s: &MaskSettings) -> u32 {
    u32::from(s.use_deformation_criterion)
        | u32::from(s.use_loss_criterion) << 1
        | u32::from(s.split_conflicts) << 2
        | u32::from(s.adaptive_interval) << 3
}

pub fn encode(model: &Model, mask: &MotionMask, optimizer: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION);
    w.usize(model.count())?;
    w.usize(model.field.basis())?;
    w.u32(model.field.lifecycle.code());
    w.usize(mask.regions.len())?;
    w.u32(u32::from(optimizer.is_some()));
    for t in model.tensors() {
        for &v in t {
            w.f32(v);
        }
    }
    w.usize(mask.width)?;
    w.usize(mask.height)?;
    w.usize(mask.grid_n)?;
    w.usize(mask.next_update_iter)?;
    w.u32(mask.next_id);
    w.f64(mask.interval);
    w.f64(mask.last_update_loss.unwrap_or(f64::NAN));
    let s = &mask.settings;
    w.f64(s.delta1);
    w.f64(s.delta2);
    w.f64(s.delta3);
    w.usize(s.min_side)?;
    w.u32(switch_bits(s));
    w.f64(s.factor_min);
    w.f64(s.factor_max);
    for r in &mask.regions {
        w.u32(r.id);
        for v in [r.rect.x0, r.rect.y0, r.rect.x1, r.rect.y1] {
            w.usize(v)?;
        }
        w.u32(match r.status {
            RegionStatus::Dynamic => 0,
            RegionStatus::Static => 1,
        });
        w.u32(r.depth);
        w.f64(r.static_baseline);
    }
    if let Some(o) = optimizer {
        w.u64(o.step);
        w.f64(o.settings.beta1);
        w.f64(o.settings.beta2);
        w.f64(o.settings.eps);
        for buf in o.m.iter().chain(&o.v) {
            for &v in buf {
                w.f32(v);
            }
        }
    }
    Ok(w.0)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.usize()?;
    let basis = r.usize()?;
    let code = r.u32()?;
    let lifecycle =
        LifecycleMode::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown lifecycle code {code}")))?;
    let regions = r.usize()?;
    let has_opt = r.u32()? != 0;
    if basis == 0 {
        return Err(Error::Checkpoint("basis count is zero".into()));
    }
    // Guard the allocation below against nonsense counts.
    if n.saturating_mul(14) > bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{n} gaussians cannot fit in {} bytes",
            bytes.len()
        )));
    }
    let cloud = GaussianCloud {
        means: vec![[0.0; 3]; n],
        raw_scales: vec![[0.0; 3]; n],
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
        raw_opacities: vec![0.0; n],
        colors: vec![[0.0; 3]; n],
    };
    let mut model = Model {
        cloud,
        field: init_field(n, basis, LifecycleMode::Additive)?,
    };
    model.field.lifecycle = lifecycle;
    for t in model.tensors_mut() {
        r.fill(t)?;
    }
    model.cloud.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let width = r.usize()?;
    let height = r.usize()?;
    let grid_n = r.usize()?;
    let next_update_iter = r.usize()?;
    let next_id = r.u32()?;
    let interval = r.f64()?;
    let last = r.f64()?;
    let settings = MaskSettings {
        delta1: r.f64()?,
        delta2: r.f64()?,
        delta3: r.f64()?,
        min_side: r.usize()?,
        use_deformation_criterion: false,
        use_loss_criterion: false,
        split_conflicts: false,
        adaptive_interval: false,
        factor_min: 0.0,
        factor_max: 0.0,
    };
    let bits = r.u32()?;
    let settings = MaskSettings {
        use_deformation_criterion: bits & 1 != 0,
        use_loss_criterion: bits & 2 != 0,
        split_conflicts: bits & 4 != 0,
        adaptive_interval: bits & 8 != 0,
        factor_min: r.f64()?,
        factor_max: r.f64()?,
        ..settings
    };
    let mut mask_regions = Vec::with_capacity(regions.min(bytes.len() / 32));
    for _ in 0..regions {
        let id = r.u32()?;
        let rect = Rect {
            x0: r.usize()?,
            y0: r.usize()?,
            x1: r.usize()?,
            y1: r.usize()?,
        };
        let status = match r.u32()? {
            0 => RegionStatus::Dynamic,
            1 => RegionStatus::Static,
            s => return Err(Error::Checkpoint(format!("bad region status {s}"))),
        };
        let depth = r.u32()?;
        let static_baseline = r.f64()?;
        if !(rect.x0 < rect.x1 && rect.y0 < rect.y1 && rect.x1 <= width && rect.y1 <= height) {
            return Err(Error::Checkpoint(format!("region {id} lies outside the image")));
        }
        mask_regions.push(Region {
            id,
            rect,
            status,
            depth,
            static_baseline,
        });
    }
    let mask = MotionMask {
        width,
        height,
        grid_n,
        regions: mask_regions,
        next_update_iter,
        interval,
        last_update_loss: (!last.is_nan()).then_some(last),
        next_id,
        settings,
    };
    let optimizer = if has_opt {
        let step = r.u64()?;
        let settings = AdamSettings {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut o = OptimizerState::new(&model, settings);
        o.step = step;
        for buf in o.m.iter_mut().chain(o.v.iter_mut()) {
            r.fill(buf)?;
        }
        Some(o)
    } else {
        None
    };
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint { model, mask, optimizer })
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    mask: &MotionMask,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model, mask, optimizer)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&read_bytes(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::load(path, m),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::init_mask;

    fn sample() -> (Model, MotionMask, OptimizerState) {
        let n = 3;
        let cloud = GaussianCloud::new(
            (0..n).map(|i| [i as f64 * 0.5, 0.25, 4.0]).collect(),
            vec![[-1.5, -1.25, -2.0]; n],
            vec![[0.5, 0.5, 0.5, 0.5]; n],
            vec![0.75; n],
            vec![[0.125, 0.5, 1.0]; n],
        )
        .unwrap();
        let mut field = init_field(n, 4, LifecycleMode::Multiplicative).unwrap();
        field.position.weights[5] = 0.375;
        let model = Model { cloud, field };
        let mut mask = init_mask(64, 64, 2).unwrap();
        mask.regions[1].status = RegionStatus::Static;
        mask.regions[1].static_baseline = 2.5;
        mask.last_update_loss = Some(0.5);
        let mut opt = OptimizerState::new(&model, AdamSettings::default());
        opt.step = 7;
        opt.m[0][2] = 0.25;
        opt.v[16][1] = 0.125;
        (model, mask, opt)
    }

    #[test]
    fn round_trip() {
        let (model, mask, opt) = sample();
        let bytes = encode(&model, &mask, Some(&opt)).unwrap();
        assert_eq!(&bytes[..4], b"EHSG");
        let back = decode(&bytes).unwrap();
        // Every sample value above is exactly representable in f32.
        assert_eq!(back.model.cloud, model.cloud);
        assert_eq!(back.model.field.lifecycle, LifecycleMode::Multiplicative);
        assert_eq!(back.model.field.position.weights[5], 0.375);
        assert_eq!(back.mask, mask);
        let o = back.optimizer.unwrap();
        assert_eq!((o.step, o.m[0][2], o.v[16][1]), (7, 0.25, 0.125));
        assert!(decode(&encode(&model, &mask, None).unwrap())
            .unwrap()
            .optimizer
            .is_none());
    }

    #[test]
    fn rejects_corruption() {
        let (model, mask, opt) = sample();
        let bytes = encode(&model, &mask, Some(&opt)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(decode(&version).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn file_round_trip() {
        let (model, mask, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&p, &model, &mask, None).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().mask, mask);
        std::fs::write(&p, b"EHSG").unwrap();
        assert!(load_checkpoint(&p).unwrap_err().to_string().contains("model.ckpt"));
    }
}
