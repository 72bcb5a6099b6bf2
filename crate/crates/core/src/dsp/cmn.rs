use crate::error::{contract, Result};
use crate::tensor::{LinearOp, Tensor};

/// Sliding-window cepstral mean normalization over the rows of a
/// `frames x features` matrix.
///
/// Each frame has the mean of a centred `window`-frame neighbourhood
/// subtracted. Near the clip edges the window slides inward so that it keeps
/// its full length where the clip allows it; a window at least as long as the
/// clip therefore reduces to global mean subtraction.
#[derive(Clone, Debug)]
pub struct SlidingCmn {
    window: usize,
}

impl SlidingCmn {
    pub fn new(window: usize) -> Result<Self> {
        contract!(window > 0, "CMN window must be positive");
        Ok(Self { window })
    }

    /// Half-open frame range averaged for frame `t` of `frames`.
    fn range(&self, t: usize, frames: usize) -> (usize, usize) {
        let mut lo = t as isize - (self.window / 2) as isize;
        let mut hi = lo + self.window as isize;
        if lo < 0 {
            hi -= lo;
            lo = 0;
        }
        if hi > frames as isize {
            lo -= hi - frames as isize;
            hi = frames as isize;
        }
        (lo.max(0) as usize, hi as usize)
    }

    fn dims(x: &Tensor) -> Result<(usize, usize)> {
        contract!(
            x.rank() == 2,
            "CMN expects a frames x features matrix, got {:?}",
            x.shape()
        );
        Ok((x.shape()[0], x.shape()[1]))
    }
}

impl LinearOp for SlidingCmn {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t_len, f_len) = Self::dims(x)?;
        let d = x.data();
        // prefix[t] holds the column sums of rows < t
        let mut prefix = vec![0.0; (t_len + 1) * f_len];
        for t in 0..t_len {
            for f in 0..f_len {
                prefix[(t + 1) * f_len + f] = prefix[t * f_len + f] + d[t * f_len + f];
            }
        }
        let mut out = d.to_vec();
        for t in 0..t_len {
            let (lo, hi) = self.range(t, t_len);
            let n = (hi - lo) as f64;
            for f in 0..f_len {
                out[t * f_len + f] -= (prefix[hi * f_len + f] - prefix[lo * f_len + f]) / n;
            }
        }
        Tensor::new(x.shape(), out)
    }

    fn adjoint(&self, g: &Tensor) -> Tensor {
        let (t_len, f_len) = (g.shape()[0], g.shape()[1]);
        let gd = g.data();
        // spread g[t] / |W(t)| over W(t) with a difference array
        let mut diff = vec![0.0; (t_len + 1) * f_len];
        for t in 0..t_len {
            let (lo, hi) = self.range(t, t_len);
            let n = (hi - lo) as f64;
            for f in 0..f_len {
                let v = gd[t * f_len + f] / n;
                diff[lo * f_len + f] += v;
                diff[hi * f_len + f] -= v;
            }
        }
        let mut out = gd.to_vec();
        let mut run = vec![0.0; f_len];
        for t in 0..t_len {
            for f in 0..f_len {
                run[f] += diff[t * f_len + f];
                out[t * f_len + f] -= run[f];
            }
        }
        Tensor::new(g.shape(), out).expect("shape preserved")
    }
}

/// Applies [`SlidingCmn`] with the given window to a feature matrix.
pub fn sliding_cmn(features: &Tensor, window: usize) -> Result<Tensor> {
    SlidingCmn::new(window)?.forward(features)
}
