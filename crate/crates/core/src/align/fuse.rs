//! Single-head cross-attention from channel tokens to channel texts.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::Bind;
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct CrossFuse {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    /// Zero at initialisation, so the fused output starts as the identity.
    pub wo: ParamId,
}

impl CrossFuse {
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Self {
            wq: store.add_normal("fuse.q", &[d, d], std, rng),
            wk: store.add_normal("fuse.k", &[d, d], std, rng),
            wv: store.add_normal("fuse.v", &[d, d], std, rng),
            wo: store.add_zeros("fuse.o", &[d, d], true),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    /// `h_cit + Attn(h_cit, z_ch, z_ch)` for one instance (`C×d` each).
    pub fn forward(&self, tape: &mut Tape, bind: Bind, h_cit: Var, z_ch: Var) -> Result<Var> {
        let d = tape.value(h_cit).cols();
        let wq = bind.var(tape, self.wq);
        let wk = bind.var(tape, self.wk);
        let wv = bind.var(tape, self.wv);
        let wo = bind.var(tape, self.wo);
        let q = tape.matmul(h_cit, wq)?;
        let k = tape.matmul(z_ch, wk)?;
        let v = tape.matmul(z_ch, wv)?;
        let s = tape.matmul_nt(q, k)?;
        let s = tape.scale(s, 1.0 / (d as f64).sqrt());
        let a = tape.softmax(s, None)?;
        let o = tape.matmul(a, v)?;
        let o = tape.matmul(o, wo)?;
        tape.add(h_cit, o)
    }
}
