use super::{Dual, NumericsError, Scalar, Tape, Tensor, Var};

/// A scalar function of a list of parameter tensors, expressed once and
/// evaluated over any [`Scalar`].
pub trait Objective {
    fn loss<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var, NumericsError>;
}

/// Loss value and gradient with respect to every parameter tensor.
pub fn gradient<O: Objective + ?Sized>(
    objective: &O,
    params: &[Tensor<f64>],
) -> Result<(f64, Vec<Tensor<f64>>), NumericsError> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = objective.loss(&mut tape, &vars)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss, false)?;
    let out = params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| Tensor::new(p.shape().to_vec(), grads.get_or_zeros(v, p.len())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((value, out))
}

/// Exact Hessian-vector product by forward-over-reverse differentiation:
/// the reverse pass runs over dual numbers whose tangents are seeded with `v`.
pub fn hvp_exact<O: Objective + ?Sized>(
    objective: &O,
    params: &[Tensor<f64>],
    v: &[Tensor<f64>],
) -> Result<Vec<Tensor<f64>>, NumericsError> {
    check_direction(params, v)?;
    let mut tape = Tape::<Dual>::new();
    let vars: Vec<Var> = params
        .iter()
        .zip(v)
        .map(|(p, d)| {
            let data = p
                .data()
                .iter()
                .zip(d.data())
                .map(|(&x, &e)| Dual::new(x, e))
                .collect();
            tape.param(Tensor::new(p.shape().to_vec(), data).expect("shape checked"))
        })
        .collect();
    let loss = objective.loss(&mut tape, &vars)?;
    let grads = tape.backward(loss, false)?;
    let mut out = Vec::with_capacity(params.len());
    for (p, &var) in params.iter().zip(&vars) {
        let g = grads.get_or_zeros(var, p.len());
        let hv: Vec<f64> = g.iter().map(|d| d.eps).collect();
        if hv.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("hessian-vector product"));
        }
        out.push(Tensor::new(p.shape().to_vec(), hv)?);
    }
    Ok(out)
}

/// `(∇L(w + εv) − ∇L(w − εv)) / 2ε` with `ε` scaled to the parameter norm.
pub fn hvp_finite_difference<O: Objective + ?Sized>(
    objective: &O,
    params: &[Tensor<f64>],
    v: &[Tensor<f64>],
) -> Result<Vec<Tensor<f64>>, NumericsError> {
    check_direction(params, v)?;
    let w_norm = params.iter().map(|p| p.sq_norm()).sum::<f64>().sqrt();
    let v_norm = v.iter().map(|p| p.sq_norm()).sum::<f64>().sqrt();
    let eps = 1e-5 * (1.0 + w_norm) / v_norm;
    let shifted = |sign: f64| -> Result<Vec<Tensor<f64>>, NumericsError> {
        params
            .iter()
            .zip(v)
            .map(|(p, d)| {
                let data = p
                    .data()
                    .iter()
                    .zip(d.data())
                    .map(|(&x, &e)| x + sign * eps * e)
                    .collect();
                Tensor::new(p.shape().to_vec(), data)
            })
            .collect()
    };
    let (_, plus) = gradient(objective, &shifted(1.0)?)?;
    let (_, minus) = gradient(objective, &shifted(-1.0)?)?;
    let mut out = Vec::with_capacity(params.len());
    for (gp, gm) in plus.iter().zip(&minus) {
        let data: Vec<f64> = gp
            .data()
            .iter()
            .zip(gm.data())
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("hessian-vector product"));
        }
        out.push(Tensor::new(gp.shape().to_vec(), data)?);
    }
    Ok(out)
}

fn check_direction(params: &[Tensor<f64>], v: &[Tensor<f64>]) -> Result<(), NumericsError> {
    if params.len() != v.len() {
        return Err(NumericsError::Invalid(format!(
            "direction has {} tensors, parameters have {}",
            v.len(),
            params.len()
        )));
    }
    for (p, d) in params.iter().zip(v) {
        if p.shape() != d.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "hvp",
                left: p.shape().to_vec(),
                right: d.shape().to_vec(),
            });
        }
    }
    if v.iter().all(|d| d.data().iter().all(|&x| x == 0.0)) {
        return Err(NumericsError::Invalid("hvp direction has zero norm".into()));
    }
    Ok(())
}

/// Concatenates tensors into one flat vector.
pub fn flatten(tensors: &[Tensor<f64>]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Splits a flat vector back into tensors shaped like `like`.
pub fn unflatten(flat: &[f64], like: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>, NumericsError> {
    let total: usize = like.iter().map(|t| t.len()).sum();
    if total != flat.len() {
        return Err(NumericsError::BadData {
            shape: vec![total],
            len: flat.len(),
        });
    }
    let mut offset = 0;
    like.iter()
        .map(|t| {
            let chunk = flat[offset..offset + t.len()].to_vec();
            offset += t.len();
            Tensor::new(t.shape().to_vec(), chunk)
        })
        .collect()
}
