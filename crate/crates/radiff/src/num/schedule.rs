use std::f64::consts::PI;

/// Learning-rate schedule. One-cycle ramps cosine from `max/25` up to `max`
/// over the first 30% of steps, then cosine down to `max/1e4`; step-decay
/// multiplies by `gamma` every `step_size` epochs.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    OneCycle { max_lr: f64, total_steps: usize },
    StepDecay { base_lr: f64, step_size: usize, gamma: f64 },
    Constant { lr: f64 },
}

const ONE_CYCLE_PCT_START: f64 = 0.3;
const ONE_CYCLE_DIV: f64 = 25.0;
const ONE_CYCLE_FINAL_DIV: f64 = 1e4;

impl LrSchedule {
    pub fn value(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay { base_lr, step_size, gamma } => {
                base_lr * gamma.powi((step / step_size) as i32)
            }
            LrSchedule::OneCycle { max_lr, total_steps } => {
                assert!(step < *total_steps, "step {step} out of {total_steps}");
                let peak = ((*total_steps as f64 - 1.0) * ONE_CYCLE_PCT_START).round() as usize;
                let start = max_lr / ONE_CYCLE_DIV;
                let fin = max_lr / ONE_CYCLE_FINAL_DIV;
                if step <= peak {
                    let frac = if peak == 0 { 1.0 } else { step as f64 / peak as f64 };
                    start + (max_lr - start) * 0.5 * (1.0 - (PI * frac).cos())
                } else {
                    let frac = (step - peak) as f64 / (*total_steps - 1 - peak) as f64;
                    fin + (max_lr - fin) * 0.5 * (1.0 + (PI * frac).cos())
                }
            }
        }
    }

    pub fn peak_step(&self) -> usize {
        match self {
            LrSchedule::OneCycle { total_steps, .. } => {
                ((*total_steps as f64 - 1.0) * ONE_CYCLE_PCT_START).round() as usize
            }
            _ => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cycle_hits_max_at_peak() {
        let s = LrSchedule::OneCycle { max_lr: 1e-4, total_steps: 1000 };
        assert_eq!(s.value(s.peak_step()), 1e-4);
    }

    #[test]
    fn one_cycle_positive_everywhere() {
        let s = LrSchedule::OneCycle { max_lr: 1e-4, total_steps: 100 };
        for step in 0..100 {
            assert!(s.value(step) > 0.0, "non-positive lr at step {step}");
        }
    }

    #[test]
    fn step_decay_halves_at_epoch_45() {
        let s = LrSchedule::StepDecay { base_lr: 1e-3, step_size: 45, gamma: 0.5 };
        assert_eq!(s.value(45), 5e-4);
    }

    #[test]
    fn step_decay_epoch_zero_is_base() {
        let s = LrSchedule::StepDecay { base_lr: 1e-3, step_size: 45, gamma: 0.5 };
        assert_eq!(s.value(0), 1e-3);
    }
}
