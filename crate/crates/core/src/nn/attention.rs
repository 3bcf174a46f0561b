//! Attention inputs and the soft attention unit.

use rand::Rng;

use super::layers::Conv;
use super::params::{Ctx, ParamStore};
use crate::data::{BinaryMask, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

pub const ATTENTION_CHANNELS: usize = 3;

fn mask_plane<T: Scalar>(m: &BinaryMask) -> impl Iterator<Item = T> + '_ {
    m.bits().iter().map(|&b| if b { T::one() } else { T::zero() })
}

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!(
            "{what} differ in size: {}×{} vs {}×{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

/// `1×3×H×W` map `[S, O, S+O]`.
pub fn build_attention_input<T: Scalar>(s_mask: &BinaryMask, o_mask: &BinaryMask) -> Result<Tensor<T>> {
    check_dims("subject and object masks", s_mask.dims(), o_mask.dims())?;
    let (h, w) = s_mask.dims();
    let mut data: Vec<T> = Vec::with_capacity(3 * h * w);
    data.extend(mask_plane::<T>(s_mask));
    data.extend(mask_plane::<T>(o_mask));
    let sum: Vec<T> = (0..h * w).map(|i| data[i] + data[h * w + i]).collect();
    data.extend(sum);
    Tensor::new(vec![1, 3, h, w], data)
}

/// `1×3×H×W` image with channels scaled into `[0, 1]`.
pub fn image_tensor<T: Scalar>(image: &RgbImage) -> Result<Tensor<T>> {
    let (h, w) = image.dims();
    let raw = image.raw();
    let mut data = vec![T::zero(); 3 * h * w];
    let scale = T::from_f64(1.0 / 255.0);
    for p in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + p] = T::from_f64(raw[p * 3 + ch] as f64) * scale;
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// `1×5×H×W` stem input `[S, O, R, G, B]`.
pub fn hard_attention_input<T: Scalar>(
    image: &Tensor<T>,
    s_mask: &BinaryMask,
    o_mask: &BinaryMask,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "hard attention expects a single 1×3×H×W image".into(),
        });
    }
    check_dims("image and subject mask", (h, w), s_mask.dims())?;
    check_dims("image and object mask", (h, w), o_mask.dims())?;
    let s = Tensor::new(vec![1, 1, h, w], mask_plane(s_mask).collect())?;
    let o = Tensor::new(vec![1, 1, h, w], mask_plane(o_mask).collect())?;
    Tensor::concat_channels(&[&s, &o, image])
}

/// Resize the attention input to the host's `(H, W)`, then one padded 3×3
/// conv to `K` channels. No activation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionUnit {
    pub conv: Conv,
    pub target_h: usize,
    pub target_w: usize,
    pub target_k: usize,
}

impl AttentionUnit {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        (target_k, target_h, target_w): (usize, usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, rng, name, (ATTENTION_CHANNELS, target_k), 3, 1)?,
            target_h,
            target_w,
            target_k,
        })
    }

    pub fn forward<T: Scalar, R: Rng + ?Sized>(&self, cx: &mut Ctx<'_, T, R>, att: Var) -> Result<Var> {
        let resized = cx.resize_cached(att, self.target_h, self.target_w)?;
        self.conv.forward(cx, resized)
    }
}
