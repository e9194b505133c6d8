//! Reconstruction, forecasting and classification heads.

use rand::Rng;

use super::encoder::{Bind, TapeEncoding};
use super::revin::RevinState;
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map `x·W + b` applied row-wise.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[fan_in, fan_out], std, rng);
        let b = store.add_zeros(format!("{name}.b"), &[fan_out], false);
        Self { w, b }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), &[fan_in, fan_out], true);
        let b = store.add_zeros(format!("{name}.b"), &[fan_out], false);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bind: Bind, x: Var) -> Result<Var> {
        let w = bind.var(tape, self.w);
        let b = bind.var(tape, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).shape()[0]
    }
}

/// Per-patch linear `d → P` on patch positions; output `(C·T̂)×P`.
pub fn reconstruct(
    tape: &mut Tape,
    bind: Bind,
    head: &Linear,
    enc: &TapeEncoding,
) -> Result<Var> {
    let rows = tape.gather_rows(enc.hidden, &enc.layout.patch_positions())?;
    head.forward(tape, bind, rows)
}

/// Class logits `1×classes` from the CLS row.
pub fn classify(tape: &mut Tape, bind: Bind, head: &Linear, enc: &TapeEncoding) -> Result<Var> {
    let cls = tape.slice_rows(enc.hidden, enc.layout.cls_pos(), 1)?;
    head.forward(tape, bind, cls)
}

/// Channel-shared linear from a channel's concatenated patch outputs
/// (`T̂·d → H`).
#[derive(Debug, Clone)]
pub struct ForecastHead {
    pub linear: Linear,
    pub patches: usize,
    pub horizon: usize,
}

impl ForecastHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        patches: usize,
        d: usize,
        horizon: usize,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::init(store, name, patches * d, horizon, 0.02, rng);
        Self {
            linear,
            patches,
            horizon,
        }
    }

    /// Normalized-space forecast `C×H`.
    pub fn forward(&self, tape: &mut Tape, bind: Bind, enc: &TapeEncoding) -> Result<Var> {
        let layout = &enc.layout;
        if layout.patches != self.patches {
            return Err(invalid(
                "forecast_head",
                format!("head built for {} patches, input has {}", self.patches, layout.patches),
            ));
        }
        let rows = tape.gather_rows(enc.hidden, &layout.patch_positions())?;
        let d = tape.value(rows).cols();
        let flat = tape.reshape(rows, &[layout.channels, layout.patches * d])?;
        self.linear.forward(tape, bind, flat)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        self.linear.ids()
    }
}

/// RevIN inverse on a `C×H` tape value.
pub fn denormalize_tape(tape: &mut Tape, y: Var, state: &RevinState) -> Result<Var> {
    let (c, h) = {
        let s = tape.value(y).shape();
        (s[0], s[1])
    };
    if c != state.mean.len() {
        return Err(invalid(
            "denormalize",
            format!("{c} rows for {} channel statistics", state.mean.len()),
        ));
    }
    let expand = |v: &[f64]| {
        Tensor::new(
            vec![c, h],
            v.iter().flat_map(|x| std::iter::repeat_n(*x, h)).collect(),
        )
    };
    let s = tape.constant(expand(&state.std)?);
    let m = tape.constant(expand(&state.mean)?);
    let y = tape.mul(y, s)?;
    tape.add(y, m)
}
