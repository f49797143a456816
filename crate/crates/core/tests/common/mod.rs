//! Shared test helpers: exhaustive max-min enumeration and a fixed
//! pseudo-random reward toy.

use rampc_core::planning::SimModel;

/// Enumerate every action sequence of the given depth and return the first
/// action and value of the sequence maximising the worst model's
/// discounted return. Ties go to the lexicographically first sequence.
pub fn maxmin_enumeration<M: SimModel>(
    roots: &[M::State],
    models: &[M],
    n_actions: usize,
    gamma: f64,
    depth: usize,
) -> (usize, f64) {
    let total = n_actions.pow(depth as u32);
    let mut best_first = 0usize;
    let mut best_value = f64::NEG_INFINITY;
    for code in 0..total {
        let mut seq = Vec::with_capacity(depth);
        let mut c = code;
        for _ in 0..depth {
            seq.push(c % n_actions);
            c /= n_actions;
        }
        let mut worst = f64::INFINITY;
        for (m, model) in models.iter().enumerate() {
            let mut state = roots[m].clone();
            let mut value = 0.0;
            for (n, &a) in seq.iter().enumerate() {
                let (next, r) = model.step(&state, a).expect("toy model never fails");
                value += gamma.powi(n as i32) * r;
                state = next;
            }
            worst = worst.min(value);
        }
        if worst > best_value {
            best_value = worst;
            best_first = seq[0];
        }
    }
    (best_first, best_value)
}

/// Deterministic binary-tree toy: the state is the action path, rewards
/// are a fixed integer hash of the path in [0, 1], zero beyond `depth`.
pub struct HashedBinaryToy {
    pub depth: usize,
}

impl HashedBinaryToy {
    fn path_id(path: &[usize]) -> u64 {
        let mut id = 1u64;
        for &a in path {
            id = id * 2 + a as u64;
        }
        id
    }
}

impl SimModel for HashedBinaryToy {
    type State = Vec<usize>;

    fn step(&self, state: &Vec<usize>, action: usize) -> rampc_core::Result<(Vec<usize>, f64)> {
        let mut next = state.clone();
        next.push(action);
        let r = if next.len() > self.depth {
            0.0
        } else {
            let id = Self::path_id(&next);
            (id.wrapping_mul(2654435761).wrapping_add(40503) % 10_000) as f64 / 9_999.0
        };
        Ok((next, r))
    }
}
