//! Adam over the avatar's Gaussian parameters and networks with per-group
//! learning rates.

use crate::avatar::{sh, AvatarGrads, GaussianAvatar};
use crate::densify::Origin;
use crate::error::{Error, Result};
use crate::nets::{Mlp, MlpGrads};

use super::config::LearningRates;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-15;

/// Slots per Gaussian: center, rotation, log-scale, opacity, SH.
fn slots(sh_degree: usize) -> usize {
    3 + 4 + 3 + 1 + 3 * sh::num_coeffs(sh_degree)
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Step {
    bc1: f64,
    bc2: f64,
}

impl Step {
    #[inline]
    fn apply(self, p: &mut f64, g: f64, m: &mut f64, v: &mut f64, lr: f64) {
        *m = BETA1 * *m + (1.0 - BETA1) * g;
        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
        *p -= lr * (*m / self.bc1) / ((*v / self.bc2).sqrt() + EPS);
    }
}

/// Optimizer state. Gaussian moments are stored row-major, one row per
/// Gaussian, and follow densification through [`remap`](Self::remap).
#[derive(Debug, Clone, PartialEq)]
pub struct AvatarAdam {
    steps: u64,
    width: usize,
    gaussians: Moments,
    nets: [Moments; 3],
}

fn net_moments(net: &Mlp) -> Moments {
    Moments::zeros(net.num_params())
}

fn step_net(net: &mut Mlp, grads: &MlpGrads, mom: &mut Moments, lr: f64, step: Step) {
    let mut k = 0;
    for (ps, gs) in net.param_slices_mut().into_iter().zip(Mlp::grad_slices(grads)) {
        for (p, g) in ps.iter_mut().zip(gs) {
            step.apply(p, *g, &mut mom.m[k], &mut mom.v[k], lr);
            k += 1;
        }
    }
}

impl AvatarAdam {
    pub fn new(avatar: &GaussianAvatar) -> Self {
        let width = slots(avatar.sh_degree);
        AvatarAdam {
            steps: 0,
            width,
            gaussians: Moments::zeros(width * avatar.len()),
            nets: [
                net_moments(&avatar.lbs_net),
                net_moments(&avatar.pose_net),
                net_moments(&avatar.conf_net),
            ],
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every Gaussian and network parameter. `position_lr`
    /// is the scheduled position rate for this step.
    pub fn step(
        &mut self,
        avatar: &mut GaussianAvatar,
        grads: &AvatarGrads,
        conf_grads: &MlpGrads,
        lr: &LearningRates,
        position_lr: f64,
    ) -> Result<()> {
        if grads.centers.len() != avatar.len() || self.gaussians.m.len() != self.width * avatar.len() {
            return Err(Error::dimension("optimizer gaussians", avatar.len(), grads.centers.len()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let step = Step {
            bc1: 1.0 - BETA1.powi(t),
            bc2: 1.0 - BETA2.powi(t),
        };
        let w = self.width;
        let sh_rest = lr.sh / 20.0;
        let mom = &mut self.gaussians;
        for (i, g) in avatar.gaussians.iter_mut().enumerate() {
            let base = i * w;
            let mut k = base;
            let mut upd = |p: &mut f64, d: f64, rate: f64| {
                step.apply(p, d, &mut mom.m[k], &mut mom.v[k], rate);
                k += 1;
            };
            for a in 0..3 {
                upd(&mut g.center[a], grads.centers[i][a], position_lr);
            }
            for a in 0..4 {
                upd(&mut g.rotation[a], grads.rotations[i][a], lr.rotation);
            }
            for a in 0..3 {
                upd(&mut g.log_scale[a], grads.log_scales[i][a], lr.scale);
            }
            upd(&mut g.opacity, grads.opacities[i], lr.opacity);
            for (c, (coef, d)) in g.sh.iter_mut().zip(&grads.sh[i]).enumerate() {
                let rate = if c == 0 { lr.sh } else { sh_rest };
                for a in 0..3 {
                    upd(&mut coef[a], d[a], rate);
                }
            }
            g.normalize_rotation();
        }
        let [lbs, pose, conf] = &mut self.nets;
        step_net(&mut avatar.lbs_net, &grads.lbs_net, lbs, lr.nets, step);
        step_net(&mut avatar.pose_net, &grads.pose_net, pose, lr.nets, step);
        step_net(&mut avatar.conf_net, conf_grads, conf, lr.nets, step);
        Ok(())
    }

    /// Follow a densification: kept Gaussians keep their moments, new
    /// children start from zero.
    pub fn remap(&mut self, origins: &[Origin]) {
        let w = self.width;
        let old = std::mem::take(&mut self.gaussians);
        let mut new = Moments::zeros(w * origins.len());
        for (j, o) in origins.iter().enumerate() {
            if let Origin::Kept(i) = *o {
                new.m[j * w..(j + 1) * w].copy_from_slice(&old.m[i * w..(i + 1) * w]);
                new.v[j * w..(j + 1) * w].copy_from_slice(&old.v[i * w..(i + 1) * w]);
            }
        }
        self.gaussians = new;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::AvatarConfig;
    use crate::bodymodel::synthetic::cylinder_arm;

    fn small() -> GaussianAvatar {
        let cfg = AvatarConfig {
            sh_degree: 1,
            lbs_width: 8,
            pose_width: 4,
            conf_width: 4,
            ..AvatarConfig::default()
        };
        GaussianAvatar::init_from_model(&cylinder_arm(), &cfg).unwrap()
    }

    #[test]
    fn first_step_moves_each_parameter_by_its_rate() {
        let mut a = small();
        let before = a.clone();
        let mut g = AvatarGrads::zeros(&a);
        g.centers[0].x = 3.0;
        g.opacities[1] = -0.5;
        g.sh[2][0][1] = 1e-3;
        g.sh[2][1][1] = 1e-3;
        let conf = MlpGrads::zeros_like(&a.conf_net);
        let lr = LearningRates::default();
        let mut opt = AvatarAdam::new(&a);
        opt.step(&mut a, &g, &conf, &lr, 0.25).unwrap();
        // Bias-corrected Adam moves by exactly the rate on the first step.
        assert!((before.gaussians[0].center.x - a.gaussians[0].center.x - 0.25).abs() < 1e-12);
        assert!((a.gaussians[1].opacity - before.gaussians[1].opacity - lr.opacity).abs() < 1e-12);
        assert!((before.gaussians[2].sh[0][1] - a.gaussians[2].sh[0][1] - lr.sh).abs() < 1e-12);
        assert!((before.gaussians[2].sh[1][1] - a.gaussians[2].sh[1][1] - lr.sh / 20.0).abs() < 1e-12);
        assert_eq!(a.gaussians[3], before.gaussians[3]);
        assert_eq!(a.lbs_net, before.lbs_net);
    }

    #[test]
    fn remap_keeps_and_zeroes_moments() {
        let mut a = small();
        let mut g = AvatarGrads::zeros(&a);
        g.centers[1].y = 1.0;
        let conf = MlpGrads::zeros_like(&a.conf_net);
        let mut opt = AvatarAdam::new(&a);
        opt.step(&mut a, &g, &conf, &LearningRates::default(), 1e-3).unwrap();
        let w = opt.width;
        let kept = opt.gaussians.m[w + 1];
        assert!(kept != 0.0);
        opt.remap(&[Origin::Kept(1), Origin::Child(1)]);
        assert_eq!(opt.gaussians.m.len(), 2 * w);
        assert_eq!(opt.gaussians.m[1], kept);
        assert!(opt.gaussians.m[w..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut a = small();
        let g = AvatarGrads::zeros(&a);
        let conf = MlpGrads::zeros_like(&a.conf_net);
        let mut opt = AvatarAdam::new(&a);
        a.gaussians.pop();
        assert!(opt.step(&mut a, &g, &conf, &LearningRates::default(), 1e-3).is_err());
    }
}
