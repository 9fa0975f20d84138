//! SGD with momentum and Adam, both with coupled L2 weight decay and PyTorch
//! update semantics. Head parameters use `lr_head`, everything else `lr_main`.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, Group, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_main: f64,
    pub lr_head: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    /// Restrict updates to one group; `None` updates both.
    only: Option<Group>,
    lr_scale: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros = |_| params.ids().map(|id| vec![T::zero(); params.value(id).len()]).collect();
        Optimizer {
            cfg,
            only: None,
            lr_scale: 1.0,
            first: zeros(()),
            second: if cfg.kind == OptimizerKind::Adam { zeros(()) } else { Vec::new() },
            steps: 0,
        }
    }

    /// Optimizer that never touches parameters outside `group`.
    pub fn for_group(cfg: OptimizerConfig, params: &ParamStore<T>, group: Group) -> Self {
        let mut opt = Self::new(cfg, params);
        opt.only = Some(group);
        opt
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Multiplier applied to both learning rates (step decay schedules).
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    pub fn current_lr_main(&self) -> f64 {
        self.cfg.lr_main * self.lr_scale
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        self.steps += 1;
        let wd = T::from_f64_lossy(self.cfg.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let spec = params.spec(id);
            if !spec.trainable || self.only.is_some_and(|g| g != spec.group) {
                continue;
            }
            let base = if spec.head { self.cfg.lr_head } else { self.cfg.lr_main };
            let lr = T::from_f64_lossy(base * self.lr_scale);
            let g = grads.get(id);
            let w = params.value_mut(id);
            let buf = &mut self.first[id.0];
            match self.cfg.kind {
                OptimizerKind::SgdMomentum => {
                    let m = T::from_f64_lossy(self.cfg.momentum);
                    for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
                        let d = g + wd * *w;
                        *b = m * *b + d;
                        *w -= lr * *b;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::from_f64_lossy(ADAM_BETA1), T::from_f64_lossy(ADAM_BETA2));
                    let t = self.steps as i32;
                    let c1 = T::one() - b1.powi(t);
                    let c2 = T::one() - b2.powi(t);
                    let eps = T::from_f64_lossy(ADAM_EPS);
                    let sq = &mut self.second[id.0];
                    for (((w, &g), m), v) in w.iter_mut().zip(g).zip(buf.iter_mut()).zip(sq.iter_mut()) {
                        let d = g + wd * *w;
                        *m = b1 * *m + (T::one() - b1) * d;
                        *v = b2 * *v + (T::one() - b2) * d * d;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSpec;

    fn store() -> (ParamStore<f64>, Grads<f64>) {
        let mut s = ParamStore::new();
        for (name, group, head) in [("w", Group::Theta, false), ("h", Group::Lambda, true)] {
            s.register(
                ParamSpec {
                    name: name.into(),
                    shape: vec![1],
                    group,
                    head,
                    trainable: true,
                },
                vec![1.0],
            );
        }
        let g = Grads::zeros_like(&s);
        (s, g)
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let (mut s, mut g) = store();
        let ids: Vec<_> = s.ids().collect();
        g.get_mut(ids[0])[0] = 0.5;
        let cfg = OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr_main: 0.1,
            lr_head: 0.2,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut opt = Optimizer::new(cfg, &s);
        opt.step(&mut s, &g);
        assert!((s.value(ids[0])[0] - (1.0 - 0.05)).abs() < 1e-15);
        opt.step(&mut s, &g);
        // buf = 0.9 * 0.5 + 0.5
        assert!((s.value(ids[0])[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-15);
        assert_eq!(s.value(ids[1])[0], 1.0);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (mut s, mut g) = store();
        let ids: Vec<_> = s.ids().collect();
        g.get_mut(ids[0])[0] = 3.0;
        g.get_mut(ids[1])[0] = -2.0;
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adam] {
            let cfg = OptimizerConfig {
                kind,
                lr_main: 0.0,
                lr_head: 0.0,
                momentum: 0.9,
                weight_decay: 0.1,
            };
            let before = s.clone();
            let mut opt = Optimizer::new(cfg, &s);
            opt.step(&mut s, &g);
            assert_eq!(s, before);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (mut s, mut g) = store();
        let ids: Vec<_> = s.ids().collect();
        g.get_mut(ids[1])[0] = 4.0;
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr_main: 1e-4,
            lr_head: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut opt = Optimizer::new(cfg, &s);
        opt.step(&mut s, &g);
        assert!((s.value(ids[1])[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert_eq!(s.value(ids[0])[0], 1.0);
    }

    #[test]
    fn group_restriction_skips_weight_decay() {
        let (mut s, g) = store();
        let ids: Vec<_> = s.ids().collect();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr_main: 0.1,
            lr_head: 0.1,
            momentum: 0.0,
            weight_decay: 0.5,
        };
        let mut opt = Optimizer::for_group(cfg, &s, Group::Lambda);
        opt.step(&mut s, &g);
        assert_eq!(s.value(ids[0])[0], 1.0);
        assert!((s.value(ids[1])[0] - 0.95).abs() < 1e-15);
    }
}
