use crate::error::{ensure, Error, Result};
use crate::nn::Ctx;
use crate::tensor::{Tensor, Var};

/// `Σ (V − V̂)² ⊙ M / Σ M`. The gradient with respect to `V̂` is written out by hand so
/// that masked entries receive exactly zero.
pub fn masked_mse<'g>(cx: &Ctx<'g, f32>, pred: Var<'g, f32>, target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Var<'g, f32>> {
    let p = pred.value();
    ensure!(
        p.shape() == target.shape() && p.shape() == mask.shape(),
        "prediction {:?}, target {:?} and mask {:?} differ in shape",
        p.shape(),
        target.shape(),
        mask.shape()
    );
    let count: f64 = mask.data().iter().map(|&m| m as f64).sum();
    if count == 0.0 {
        return Err(Error::NoValidPixels);
    }
    let mut sse = 0.0f64;
    for ((&v, &vh), &m) in target.data().iter().zip(p.data()).zip(mask.data()) {
        if m != 0.0 {
            sse += m as f64 * (v as f64 - vh as f64).powi(2);
        }
    }
    let value = Tensor::scalar((sse / count) as f32);
    let (target, mask) = (target.clone(), mask.clone());
    let grad = Box::new(move |up: &Tensor<f32>, _needs: &[bool]| {
        let scale = 2.0 * up.item() as f64 / count;
        let g = Tensor::from_fn(p.shape().to_vec(), |i| {
            let m = mask.data()[i];
            if m == 0.0 {
                0.0
            } else {
                (scale * m as f64 * (p.data()[i] as f64 - target.data()[i] as f64)) as f32
            }
        });
        vec![Some(g)]
    });
    Ok(cx.graph.custom(&[pred], value, grad))
}

/// Value of [`masked_mse`] without a graph.
pub fn masked_mse_value(target: &[f64], pred: &[f64], mask: &[f64]) -> Result<f64> {
    ensure!(target.len() == pred.len() && target.len() == mask.len(), "series lengths differ");
    let count: f64 = mask.iter().sum();
    if count == 0.0 {
        return Err(Error::NoValidPixels);
    }
    let sse: f64 = target.iter().zip(pred).zip(mask).map(|((v, vh), m)| m * (v - vh).powi(2)).sum();
    Ok(sse / count)
}
