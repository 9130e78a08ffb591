use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

/// Mean cross-entropy of `[R, C]` logits over the rows whose label is not
/// `ignore`.
pub fn cross_entropy_loss<F: Real>(g: &mut Graph<'_, F>, logits: Var, labels: &[u16], ignore: Option<u16>) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::dimension(format!("{} labels for logits of shape {s:?}", labels.len())));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| Some(l) != ignore && l as usize >= c) {
        return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
    }
    let targets: Vec<Option<usize>> = labels
        .iter()
        .map(|&l| if Some(l) == ignore { None } else { Some(l as usize) })
        .collect();
    Ok(g.cross_entropy(logits, &targets)?)
}
