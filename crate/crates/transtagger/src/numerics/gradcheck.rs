use super::graph::{Feeds, GradMap, Graph, NodeId};
use super::Error;

impl Graph {
    /// Compare analytic gradients against central differences over every
    /// parameter entry. Returns the max of
    /// `|analytic - numeric| / max(1, |analytic|)`.
    ///
    /// Refuses graphs with active (training-mode) dropout: the loss would not
    /// be a deterministic function of the parameters being perturbed.
    pub fn grad_check(&mut self, loss: NodeId, feeds: &Feeds, eps: f64) -> Result<f64, Error> {
        self.invalidate();
        self.forward(loss, feeds)?;
        let analytic = self.backward(loss)?;
        self.grad_check_against(loss, feeds, eps, &analytic)
    }

    /// The central-difference side of `grad_check`, factored out so a
    /// deliberately corrupted gradient map can be checked for detection.
    pub fn grad_check_against(
        &mut self,
        loss: NodeId,
        feeds: &Feeds,
        eps: f64,
        analytic: &GradMap,
    ) -> Result<f64, Error> {
        if !(1e-7..=1e-3).contains(&eps) {
            return Err(Error::BadEps(eps));
        }
        if self.has_stochastic_dropout() {
            return Err(Error::StochasticGradCheck);
        }
        let names: Vec<String> = self.param_names().cloned().collect();
        let mut max_rel = 0.0f64;
        for name in names {
            let grad = analytic
                .get(&name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            let n = grad.data.len();
            for i in 0..n {
                let orig = self.param_value(&name).unwrap().data[i];
                self.param_value_mut(&name).unwrap().data[i] = orig + eps;
                self.invalidate();
                let up = self.forward(loss, feeds)?.data[0];
                self.param_value_mut(&name).unwrap().data[i] = orig - eps;
                self.invalidate();
                let down = self.forward(loss, feeds)?.data[0];
                self.param_value_mut(&name).unwrap().data[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = grad.data[i];
                let rel = (a - numeric).abs() / a.abs().max(1.0);
                if rel > max_rel {
                    max_rel = rel;
                }
            }
        }
        self.invalidate();
        Ok(max_rel)
    }
}
