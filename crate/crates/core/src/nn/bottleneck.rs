//! Pre-activation bottleneck with an optional attention unit.

use rand::Rng;

use super::attention::AttentionUnit;
use super::config::BlockPlan;
use super::layers::{Conv, Norm};
use super::params::{Ctx, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub plan: BlockPlan,
    pub norm1: Norm,
    pub reduce: Conv,
    pub norm2: Norm,
    pub spatial: Conv,
    pub norm3: Norm,
    pub expand: Conv,
    pub projection: Option<Conv>,
    pub attention: Option<AttentionUnit>,
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        plan: &BlockPlan,
    ) -> Result<Self> {
        let p = plan;
        let norm1 = Norm::new(store, &format!("{name}.norm1"), p.in_channels)?;
        let reduce = Conv::new(store, rng, &format!("{name}.reduce"), (p.in_channels, p.width), 1, 1)?;
        let norm2 = Norm::new(store, &format!("{name}.norm2"), p.width)?;
        let spatial =
            Conv::new(store, rng, &format!("{name}.spatial"), (p.width, p.width), 3, p.stride)?;
        let norm3 = Norm::new(store, &format!("{name}.norm3"), p.width)?;
        let expand =
            Conv::new(store, rng, &format!("{name}.expand"), (p.width, p.out_channels), 1, 1)?;
        let projection = if p.needs_projection() {
            Some(Conv::new(
                store,
                rng,
                &format!("{name}.projection"),
                (p.in_channels, p.out_channels),
                1,
                p.stride,
            )?)
        } else {
            None
        };
        let attention = match p.attention_dims() {
            Some(dims) => {
                if dims != p.second_conv_dims() {
                    return Err(Error::InvalidConfig(format!(
                        "{name}: attention dims {dims:?} differ from second conv {:?}",
                        p.second_conv_dims()
                    )));
                }
                let (k, h, w) = p.second_conv_dims();
                Some(AttentionUnit::new(store, rng, &format!("{name}.attention"), (k, h, w))?)
            }
            None => None,
        };
        Ok(Self {
            plan: p.clone(),
            norm1,
            reduce,
            norm2,
            spatial,
            norm3,
            expand,
            projection,
            attention,
        })
    }

    /// `att` is the full-resolution attention input; it is ignored when no
    /// unit is attached.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        cx: &mut Ctx<'_, T, R>,
        x: Var,
        att: Option<Var>,
    ) -> Result<Var> {
        let pre = self.norm1.forward_relu(cx, x)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(cx, pre)?,
            None => x,
        };
        let h = self.reduce.forward(cx, pre)?;
        let h = self.norm2.forward_relu(cx, h)?;
        let mut h = self.spatial.forward(cx, h)?;
        if let (Some(unit), Some(att)) = (&self.attention, att) {
            let injected = unit.forward(cx, att)?;
            h = cx.tape.add(h, injected)?;
        }
        let h = self.norm3.forward_relu(cx, h)?;
        let h = self.expand.forward(cx, h)?;
        cx.tape.add(h, shortcut)
    }
}
