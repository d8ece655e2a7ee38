use super::Tensor;
use crate::error::Result;

/// A model whose scalar loss on one labelled input can be evaluated with and
/// without its analytic parameter gradient. Parameter order is shared by
/// `params`, `params_mut` and the gradient list.
pub trait Differentiable {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn loss(&self, input: &Tensor, label: usize) -> Result<f64>;
    fn loss_and_grad(&self, input: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)>;

    /// The loss together with the on/off pattern of every ReLU, for models
    /// that have any. Lets the checker notice a step that crosses a kink.
    fn loss_and_pattern(&self, input: &Tensor, label: usize) -> Result<(f64, Option<Vec<bool>>)> {
        Ok((self.loss(input, label)?, None))
    }
}

/// Times a step may be divided by ten to keep a perturbation off a ReLU kink.
const MAX_STEP_SHRINKS: u32 = 4;

/// Largest relative disagreement between the analytic gradient and a central
/// difference, over every scalar parameter:
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
///
/// The difference starts at step `h`. If the model reports ReLU patterns and
/// a perturbed evaluation switches any unit, the difference straddles a kink
/// and says nothing about the derivative, so the step for that parameter is
/// divided by ten, up to four times. The last estimate is used either way.
pub fn finite_difference_check<D: Differentiable>(net: &mut D, input: &Tensor, label: usize, h: f64) -> Result<f64> {
    let (_, analytic) = net.loss_and_grad(input, label)?;
    let (_, base_pattern) = net.loss_and_pattern(input, label)?;
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let mut worst: f64 = 0.0;
    for (ti, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let orig = net.params()[ti].data()[i];
            let mut step = h;
            let mut fd;
            let mut shrinks = 0;
            loop {
                net.params_mut()[ti].data_mut()[i] = orig + step;
                let plus = net.loss_and_pattern(input, label);
                net.params_mut()[ti].data_mut()[i] = orig - step;
                let minus = net.loss_and_pattern(input, label);
                net.params_mut()[ti].data_mut()[i] = orig;
                let ((lp, pp), (lm, pm)) = (plus?, minus?);
                fd = (lp - lm) / (2.0 * step);
                let crossed = base_pattern.is_some() && (pp != base_pattern || pm != base_pattern);
                if !crossed || shrinks == MAX_STEP_SHRINKS {
                    break;
                }
                step /= 10.0;
                shrinks += 1;
            }
            let a = analytic[ti].data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
