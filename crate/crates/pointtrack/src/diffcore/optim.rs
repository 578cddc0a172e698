//! AdamW with decoupled weight decay, plus the linear one-cycle learning
//! rate schedule.

use super::error::{DiffError, DiffResult};
use super::params::ParamSet;
use super::real::Real;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

/// AdamW state over one parameter registry. Moments start at zero.
pub struct AdamW<R: Real> {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(params: &ParamSet<R>, cfg: AdamWConfig) -> Self {
        let m = (0..params.len())
            .map(|i| Tensor::zeros(params.value(super::params::ParamId::from_index(i)).shape()))
            .collect();
        let v = (0..params.len())
            .map(|i| Tensor::zeros(params.value(super::params::ParamId::from_index(i)).shape()))
            .collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over all parameters. Missing gradients leave the moments
    /// and (apart from weight decay) the parameter untouched.
    pub fn step(
        &mut self,
        params: &mut ParamSet<R>,
        grads: &[Option<Tensor<R>>],
        lr: f64,
    ) -> DiffResult<()> {
        if grads.len() != params.len() {
            return Err(DiffError::InvalidConfig {
                op: "adamw_step",
                message: format!("{} grads for {} params", grads.len(), params.len()),
            });
        }
        self.step += 1;
        let b1 = R::from_f64(self.cfg.beta1);
        let b2 = R::from_f64(self.cfg.beta2);
        let one_m_b1 = R::ONE - b1;
        let one_m_b2 = R::ONE - b2;
        let bias1 = R::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bias2 = R::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let eps = R::from_f64(self.cfg.eps);
        let lr_r = R::from_f64(lr);
        let decay = R::from_f64(lr * self.cfg.weight_decay);

        for i in 0..params.len() {
            let id = super::params::ParamId::from_index(i);
            if let Some(g) = &grads[i] {
                if !g.is_all_finite() {
                    return Err(DiffError::NonFinite {
                        what: format!("gradient of parameter '{}'", params.name(id)),
                    });
                }
                if g.shape() != params.value(id).shape() {
                    return Err(DiffError::ShapeMismatch {
                        op: "adamw_step",
                        lhs: g.shape().to_vec(),
                        rhs: params.value(id).shape().to_vec(),
                    });
                }
            }
            let p = params.value_mut(id).data_mut();
            // decoupled decay applies whether or not a gradient arrived
            if self.cfg.weight_decay != 0.0 {
                for pv in p.iter_mut() {
                    *pv -= decay * *pv;
                }
            }
            if let Some(g) = &grads[i] {
                let m = self.m[i].data_mut();
                let v = self.v[i].data_mut();
                for j in 0..p.len() {
                    let gj = g.data()[j];
                    m[j] = b1 * m[j] + one_m_b1 * gj;
                    v[j] = b2 * v[j] + one_m_b2 * gj * gj;
                    let mhat = m[j] / bias1;
                    let vhat = v[j] / bias2;
                    p[j] -= lr_r * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Linear one-cycle schedule: warm up from peak/div_start to peak over
/// `warmup_frac` of the run, then anneal linearly to peak/div_final.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub div_start: f64,
    pub div_final: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle { peak_lr: 5e-4, warmup_frac: 0.1, div_start: 25.0, div_final: 1000.0 }
    }
}

impl OneCycle {
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        assert!(step <= total_steps, "step {step} beyond total {total_steps}");
        if total_steps == 0 {
            return self.peak_lr;
        }
        let warmup = ((total_steps as f64) * self.warmup_frac).round() as usize;
        let start = self.peak_lr / self.div_start;
        let last = self.peak_lr / self.div_final;
        if step <= warmup {
            if warmup == 0 {
                return self.peak_lr;
            }
            let t = step as f64 / warmup as f64;
            start + (self.peak_lr - start) * t
        } else {
            let span = (total_steps - warmup) as f64;
            let t = (step - warmup) as f64 / span;
            self.peak_lr + (last - self.peak_lr) * t
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::scalar(value)).unwrap();
        ps
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut ps = single_param(1.25);
        let mut opt = AdamW::new(&ps, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        let g = Some(Tensor::scalar(0.0));
        opt.step(&mut ps, &[g], 0.1).unwrap();
        assert_eq!(ps.value(ps.id_of("w").unwrap()).item(), 1.25);
    }

    #[test]
    fn single_step_moves_by_about_lr() {
        // g=1, lr=0.1, betas=(0.9,0.999), wd=0: bias correction makes the
        // first update almost exactly lr.
        let mut ps = single_param(0.0);
        let mut opt = AdamW::new(&ps, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut ps, &[Some(Tensor::scalar(1.0))], 0.1).unwrap();
        let w = ps.value(ps.id_of("w").unwrap()).item();
        assert!((w + 0.1).abs() < 1e-6, "first step should be ~-0.1, got {w}");
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd() {
        let mut ps = single_param(2.0);
        let cfg = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut opt = AdamW::new(&ps, cfg);
        opt.step(&mut ps, &[Some(Tensor::scalar(0.0))], 0.5).unwrap();
        let w = ps.value(ps.id_of("w").unwrap()).item();
        assert!((w - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-12, "got {w}");
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut ps = single_param(1.0);
        let mut opt = AdamW::new(&ps, AdamWConfig::default());
        let err = opt.step(&mut ps, &[Some(Tensor::scalar(f64::NAN))], 0.1).unwrap_err();
        match err {
            DiffError::NonFinite { what } => assert!(what.contains("'w'"), "{what}"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn one_cycle_endpoints() {
        let sched = OneCycle { peak_lr: 1.0, warmup_frac: 0.25, div_start: 10.0, div_final: 100.0 };
        let total = 100;
        assert!((sched.lr_at(0, total) - 0.1).abs() < 1e-12);
        assert!((sched.lr_at(25, total) - 1.0).abs() < 1e-12);
        assert!((sched.lr_at(100, total) - 0.01).abs() < 1e-12);
        // in between is strictly between the anchors
        let mid = sched.lr_at(60, total);
        assert!(mid < 1.0 && mid > 0.01);
    }
}
