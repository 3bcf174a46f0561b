//! Relationship triplets and the composition of their confidences.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

fn check(name: &'static str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::ProbabilityRange { name, value })
    }
}

/// `p(S|I) · p(P,O|S,I)`.
pub fn compose_chain(p_s: f64, p_po_given_s: f64) -> Result<f64> {
    Ok(check("p_s", p_s)? * check("p_po_given_s", p_po_given_s)?)
}

/// Confidences of one ⟨subject, predicate, object⟩ triplet with subject and
/// object detections treated as independent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletConfidence {
    pub p_s: f64,
    pub p_o: f64,
    pub p_p: f64,
    pub p_joint: f64,
}

pub fn compose_triplet(p_s: f64, p_o: f64, p_p: f64) -> Result<TripletConfidence> {
    let (p_s, p_o, p_p) = (check("p_s", p_s)?, check("p_o", p_o)?, check("p_p", p_p)?);
    Ok(TripletConfidence {
        p_s,
        p_o,
        p_p,
        p_joint: compose_chain(p_s, p_o * p_p)?,
    })
}

/// A person–clothing relationship grounded in one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub image: String,
    /// Index of the person mask.
    pub subject: usize,
    pub predicate: Label,
    /// Index of the clothing mask.
    pub object: usize,
}
