/// Step-decay learning-rate schedule: the rate halves every `period` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub initial_lr: f64,
    pub period: usize,
    pub epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { initial_lr: 4e-4, period: 50, epochs: 300 }
    }
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.period.max(1)) as i32;
        self.initial_lr * 0.5f64.powi(halvings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_on_period_boundaries() {
        let s = Schedule::default();
        assert_eq!(s.lr(0), 4e-4);
        assert_eq!(s.lr(49), 4e-4);
        assert_eq!(s.lr(50), 2e-4);
        assert_eq!(s.lr(149), 1e-4);
        assert_eq!(s.lr(299), 4e-4 / 32.0);
    }
}
