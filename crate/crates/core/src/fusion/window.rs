use crate::error::{invalid, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const WINDOW: usize = 7;
pub const WINDOW_TOKENS: usize = WINDOW * WINDOW;

/// Original and padded extents of a partitioned map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadInfo {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub channels: usize,
}

impl PadInfo {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            batch,
            height,
            width,
            padded_height: height.div_ceil(WINDOW) * WINDOW,
            padded_width: width.div_ceil(WINDOW) * WINDOW,
            channels,
        }
    }

    pub fn windows_per_image(&self) -> usize {
        (self.padded_height / WINDOW) * (self.padded_width / WINDOW)
    }
}

/// Splits `x[B, H, W, C]` into zero-padded 7×7 windows `[B·Nw, 49, C]`,
/// windows ordered row-major within each image.
pub fn window_partition(x: &Tensor) -> Result<(Tensor, PadInfo)> {
    let s = x.shape();
    if s.len() != 4 || s.iter().any(|&d| d == 0) {
        return Err(invalid("window_partition", format!("expected non-empty [B, H, W, C], got {s:?}")));
    }
    let info = PadInfo::new(s[0], s[1], s[2], s[3]);
    let (nh, nw) = (info.padded_height / WINDOW, info.padded_width / WINDOW);
    let c = info.channels;
    let mut out = vec![0.0; info.batch * nh * nw * WINDOW_TOKENS * c];
    for b in 0..info.batch {
        for y in 0..info.height {
            for xx in 0..info.width {
                let win = (b * nh + y / WINDOW) * nw + xx / WINDOW;
                let tok = (y % WINDOW) * WINDOW + xx % WINDOW;
                let src = ((b * info.height + y) * info.width + xx) * c;
                let dst = (win * WINDOW_TOKENS + tok) * c;
                out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    let windows = Tensor::new(vec![info.batch * nh * nw, WINDOW_TOKENS, c], out)?;
    Ok((windows, info))
}

/// Inverse of [`window_partition`], cropping the padding.
pub fn window_reverse(windows: &Tensor, info: &PadInfo) -> Result<Tensor> {
    let expect = [info.batch * info.windows_per_image(), WINDOW_TOKENS, info.channels];
    if windows.shape() != expect {
        return Err(invalid(
            "window_reverse",
            format!("expected {expect:?}, got {:?}", windows.shape()),
        ));
    }
    let nw = info.padded_width / WINDOW;
    let nh = info.padded_height / WINDOW;
    let c = info.channels;
    let mut out = vec![0.0; info.batch * info.height * info.width * c];
    for b in 0..info.batch {
        for y in 0..info.height {
            for xx in 0..info.width {
                let win = (b * nh + y / WINDOW) * nw + xx / WINDOW;
                let tok = (y % WINDOW) * WINDOW + xx % WINDOW;
                let src = (win * WINDOW_TOKENS + tok) * c;
                let dst = ((b * info.height + y) * info.width + xx) * c;
                out[dst..dst + c].copy_from_slice(&windows.data()[src..src + c]);
            }
        }
    }
    Tensor::new(vec![info.batch, info.height, info.width, c], out)
}

/// Differentiable partition of an already padded map `[B, Hp, Wp, C]`.
pub fn partition_windows(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] % WINDOW != 0 || s[2] % WINDOW != 0 {
        return Err(invalid("partition_windows", format!("{s:?} not padded to the window size")));
    }
    let (nh, nw) = (s[1] / WINDOW, s[2] / WINDOW);
    let r = g.reshape(x, &[s[0], nh, WINDOW, nw, WINDOW, s[3]])?;
    let p = g.permute(r, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(p, &[s[0] * nh * nw, WINDOW_TOKENS, s[3]])
}

/// Differentiable inverse of [`partition_windows`] followed by cropping.
pub fn reverse_windows(g: &mut Graph, windows: Var, info: &PadInfo) -> Result<Var> {
    let (nh, nw) = (info.padded_height / WINDOW, info.padded_width / WINDOW);
    let c = g.shape(windows).last().copied().unwrap_or(0);
    let r = g.reshape(windows, &[info.batch, nh, nw, WINDOW, WINDOW, c])?;
    let p = g.permute(r, &[0, 1, 3, 2, 4, 5])?;
    let mut full = g.reshape(p, &[info.batch, info.padded_height, info.padded_width, c])?;
    if info.padded_height != info.height {
        full = g.slice(full, 1, 0, info.height)?;
    }
    if info.padded_width != info.width {
        full = g.slice(full, 2, 0, info.width)?;
    }
    Ok(full)
}
