use super::tensor::ParamStore;

/// Learning rate that decays linearly from `base_lr` over `total_steps` and
/// is clamped at `lr_floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub lr_floor: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            base_lr: lr,
            lr_floor: lr,
            total_steps: 1,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = step as f64 / self.total_steps as f64;
        (self.base_lr - (self.base_lr - self.lr_floor) * frac).max(self.lr_floor)
    }
}

/// Adagrad with a per-coordinate squared-gradient accumulator:
/// `acc += g^2; p -= lr_t * g / (sqrt(acc) + eps)`.
#[derive(Clone, Debug)]
pub struct AdagradState {
    accumulators: Vec<Vec<f64>>,
    schedule: LrSchedule,
    epsilon: f64,
    step: usize,
}

impl AdagradState {
    pub fn new(store: &ParamStore, schedule: LrSchedule, epsilon: f64) -> Self {
        AdagradState {
            accumulators: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            schedule,
            epsilon,
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn accumulator(&self, param: usize) -> &[f64] {
        &self.accumulators[param]
    }

    /// Applies one update from the gradients currently in `store`, then
    /// zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr = self.lr();
        for (acc, t) in self.accumulators.iter_mut().zip(store.tensors_mut()) {
            let grad = t.grad().to_vec();
            for ((a, p), g) in acc.iter_mut().zip(t.values_mut()).zip(&grad) {
                if *g == 0.0 {
                    continue;
                }
                *a += g * g;
                *p -= lr * g / (a.sqrt() + self.epsilon);
            }
            t.zero_grad();
        }
        self.step += 1;
    }
}
