use crate::tensor::{Result, Scalar, Tape, Tensor, TensorError, Var};

/// Tape nodes of the four loss terms and their combination.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub l_ce: Var,
    pub l_hd: Var,
    pub var_ce: Var,
    pub var_hd: Var,
}

impl LossVars {
    pub fn values<T: Scalar>(&self, tape: &Tape<T>) -> LossComponents {
        let get = |v: Var| tape.value(v).item().to_f64().unwrap_or(f64::NAN);
        LossComponents {
            total: get(self.total),
            l_ce: get(self.l_ce),
            l_hd: get(self.l_hd),
            var_ce: get(self.var_ce),
            var_hd: get(self.var_hd),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub total: f64,
    pub l_ce: f64,
    pub l_hd: f64,
    pub var_ce: f64,
    pub var_hd: f64,
}

/// Mean absolute error plus the batch-mean of each image's error-map variance.
fn term<T: Scalar>(tape: &mut Tape<T>, target: Var, approx: Var) -> Result<(Var, Var)> {
    let diff = tape.sub(approx, target)?;
    let map = tape.abs(diff);
    let l1 = tape.mean(map)?;
    let per_image = tape.row_variance(map)?;
    let var = tape.mean(per_image)?;
    Ok((l1, var))
}

pub(crate) fn loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    cover: Var,
    hidden: Var,
    embedded: Var,
    decoded: Var,
) -> Result<LossVars> {
    let (l_ce, var_ce) = term(tape, cover, embedded)?;
    let (l_hd, var_hd) = term(tape, hidden, decoded)?;
    let a = tape.add(l_ce, l_hd)?;
    let b = tape.add(var_ce, var_hd)?;
    let sum = tape.add(a, b)?;
    let total = tape.scale(sum, 0.25);
    Ok(LossVars {
        total,
        l_ce,
        l_hd,
        var_ce,
        var_hd,
    })
}

/// `(L_CE + L_HD + Var_CE + Var_HD) / 4` for plain tensors.
pub fn stegnet_loss<T: Scalar>(
    cover: &Tensor<T>,
    hidden: &Tensor<T>,
    embedded: &Tensor<T>,
    decoded: &Tensor<T>,
) -> Result<LossComponents> {
    let shape = cover.shape();
    for t in [hidden, embedded, decoded] {
        if t.shape() != shape {
            return Err(TensorError::Shape {
                op: "stegnet_loss",
                detail: format!("{:?} vs {:?}", t.shape(), shape),
            });
        }
    }
    let mut tape = Tape::new();
    let c = tape.constant(cover.clone());
    let h = tape.constant(hidden.clone());
    let e = tape.constant(embedded.clone());
    let d = tape.constant(decoded.clone());
    Ok(loss_graph(&mut tape, c, h, e, d)?.values(&tape))
}
