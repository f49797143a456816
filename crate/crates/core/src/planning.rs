//! Optimistic tree planning over a pessimistic return, with a robust
//! multi-model upper bound.
//!
//! Each node carries one simulator state per candidate model and the
//! per-model discounted partial return of its path. Upper bounds add the
//! geometric tail `gamma^h / (1 - gamma)` to the worst-case partial
//! return; the tree repeatedly expands the leaf with the highest bound.
//! With a single model this is plain optimistic planning of deterministic
//! systems; with several models the minimum over models is taken at the
//! leaves only, which recovers max-min planning asymptotically.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Finite set of high-level actions, each an affine state-feedback
/// controller `u = -K_a x + u_a`.
#[derive(Debug, Clone)]
pub struct ActionSpace {
    pub controllers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl ActionSpace {
    pub fn new(controllers: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<Self> {
        if controllers.is_empty() {
            return Err(Error::config("action space must be non-empty"));
        }
        let (q, p) = controllers[0].0.shape();
        for (k, u) in &controllers {
            if k.shape() != (q, p) || u.len() != q {
                return Err(Error::dimension("controllers must share (q, p) dimensions"));
            }
        }
        Ok(ActionSpace { controllers })
    }

    /// Constant controls only (zero feedback gains).
    pub fn constant_controls(us: Vec<DVector<f64>>, state_dim: usize) -> Result<Self> {
        let controllers = us
            .into_iter()
            .map(|u| (DMatrix::zeros(u.len(), state_dim), u))
            .collect();
        ActionSpace::new(controllers)
    }

    pub fn len(&self) -> usize {
        self.controllers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controllers.is_empty()
    }

    pub fn control(&self, action: usize, x: &DVector<f64>) -> DVector<f64> {
        let (gain, offset) = &self.controllers[action];
        offset - gain * x
    }
}

/// A deterministic simulator of one candidate model: advances a state one
/// step under an action index and returns the pessimistic reward of the
/// resulting state, which must lie in `[0, 1]`.
pub trait SimModel {
    type State: Clone;
    fn step(&self, state: &Self::State, action: usize) -> Result<(Self::State, f64)>;
}

/// A search-tree node: an action path with per-model states and
/// pessimistic discounted partial returns.
#[derive(Debug, Clone)]
pub struct PlanNode<S> {
    pub path: Vec<usize>,
    pub per_model_state: Vec<S>,
    pub per_model_return: Vec<f64>,
    pub children: Vec<PlanNode<S>>,
    pub expanded: bool,
}

impl<S> PlanNode<S> {
    pub fn depth(&self) -> usize {
        self.path.len()
    }
}

/// Robust upper bound: leaves take the worst model's partial return plus
/// the tail `gamma^h / (1 - gamma)`; inner nodes take the best child.
pub fn b_value<S>(node: &PlanNode<S>, gamma: f64) -> f64 {
    if !node.expanded {
        let worst = node
            .per_model_return
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        worst + gamma.powi(node.depth() as i32) / (1.0 - gamma)
    } else {
        node.children
            .iter()
            .map(|c| b_value(c, gamma))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Robust lower value: leaves take the worst model's partial return; inner
/// nodes take the best child. Always `u_value <= b_value`.
pub fn u_value<S>(node: &PlanNode<S>, gamma: f64) -> f64 {
    if !node.expanded {
        node.per_model_return
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    } else {
        node.children
            .iter()
            .map(|c| u_value(c, gamma))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Result of one planning call.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub recommended_action: usize,
    pub root_b_value: f64,
    pub root_u_value: f64,
    pub tree_depth: usize,
    pub expansions_used: usize,
}

/// An optimistic planning tree over a set of candidate model simulators.
pub struct PlanTree<'a, M: SimModel> {
    root: PlanNode<M::State>,
    models: &'a [M],
    n_actions: usize,
    gamma: f64,
    expansions: usize,
    // (depth, leaf U at expansion time, first action) of the deepest expansion
    deepest: (usize, f64, Option<usize>),
}

impl<'a, M: SimModel> PlanTree<'a, M> {
    pub fn new(
        root_states: Vec<M::State>,
        models: &'a [M],
        n_actions: usize,
        gamma: f64,
    ) -> Result<Self> {
        if models.is_empty() || root_states.len() != models.len() {
            return Err(Error::config("need one root state per model"));
        }
        if n_actions == 0 {
            return Err(Error::config("need at least one action"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config("gamma must lie in (0, 1)"));
        }
        let m = models.len();
        Ok(PlanTree {
            root: PlanNode {
                path: Vec::new(),
                per_model_state: root_states,
                per_model_return: vec![0.0; m],
                children: Vec::new(),
                expanded: false,
            },
            models,
            n_actions,
            gamma,
            expansions: 0,
            deepest: (0, f64::NEG_INFINITY, None),
        })
    }

    pub fn root(&self) -> &PlanNode<M::State> {
        &self.root
    }

    pub fn root_b(&self) -> f64 {
        b_value(&self.root, self.gamma)
    }

    pub fn root_u(&self) -> f64 {
        u_value(&self.root, self.gamma)
    }

    pub fn expansions_used(&self) -> usize {
        self.expansions
    }

    /// Path (action indices) from the root to the leaf with the highest
    /// B-value, ties broken by lowest action index at every branching.
    fn select_path(&self) -> Vec<usize> {
        let mut path = Vec::new();
        let mut node = &self.root;
        while node.expanded {
            let mut best = 0usize;
            let mut best_b = f64::NEG_INFINITY;
            for (a, child) in node.children.iter().enumerate() {
                let b = b_value(child, self.gamma);
                if b > best_b {
                    best_b = b;
                    best = a;
                }
            }
            path.push(best);
            node = &node.children[best];
        }
        path
    }

    /// Expand the highest-B leaf: simulate every action under every model
    /// and attach the children. Returns the depth of the expanded leaf.
    pub fn expand_best(&mut self) -> Result<usize> {
        let path = self.select_path();
        let gamma = self.gamma;
        let n_actions = self.n_actions;
        let models = self.models;

        let mut node = &mut self.root;
        for &a in &path {
            node = &mut node.children[a];
        }
        debug_assert!(!node.expanded);
        let h = node.depth();
        let discount = gamma.powi(h as i32);
        let leaf_u = node
            .per_model_return
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);

        let mut children = Vec::with_capacity(n_actions);
        for action in 0..n_actions {
            let mut states = Vec::with_capacity(models.len());
            let mut returns = Vec::with_capacity(models.len());
            for (m, model) in models.iter().enumerate() {
                let (next, reward) = model.step(&node.per_model_state[m], action).map_err(|e| {
                    Error::Internal(format!("simulation failed at path {:?}+{}: {}", node.path, action, e))
                })?;
                if !(0.0..=1.0).contains(&reward) {
                    return Err(Error::Contract(format!(
                        "environment reward {reward} outside [0, 1]"
                    )));
                }
                states.push(next);
                returns.push(node.per_model_return[m] + discount * reward);
            }
            let mut child_path = node.path.clone();
            child_path.push(action);
            children.push(PlanNode {
                path: child_path,
                per_model_state: states,
                per_model_return: returns,
                children: Vec::new(),
                expanded: false,
            });
        }
        node.children = children;
        node.expanded = true;
        self.expansions += 1;

        let first = node.path.first().copied();
        let candidate = (h, leaf_u, first);
        let (bd, bu, bf) = self.deepest;
        let better = h > bd
            || (h == bd && leaf_u > bu)
            || (h == bd
                && leaf_u == bu
                && matches!((first, bf), (Some(a), Some(b)) if a < b));
        if better {
            self.deepest = candidate;
        }
        Ok(h)
    }

    /// First action of the deepest expanded branch; when only the root has
    /// been expanded, the root child with the highest U-value.
    pub fn recommend(&self) -> usize {
        match self.deepest.2 {
            Some(action) => action,
            None => {
                let mut best = 0usize;
                let mut best_u = f64::NEG_INFINITY;
                for (a, child) in self.root.children.iter().enumerate() {
                    let u = u_value(child, self.gamma);
                    if u > best_u {
                        best_u = u;
                        best = a;
                    }
                }
                best
            }
        }
    }

    pub fn tree_depth(&self) -> usize {
        fn depth_of<S>(n: &PlanNode<S>) -> usize {
            n.children
                .iter()
                .map(depth_of)
                .fold(n.depth(), usize::max)
        }
        depth_of(&self.root)
    }

    pub fn into_result(self) -> PlanResult {
        PlanResult {
            recommended_action: self.recommend(),
            root_b_value: self.root_b(),
            root_u_value: self.root_u(),
            tree_depth: self.tree_depth(),
            expansions_used: self.expansions,
        }
    }
}

/// Run `budget` expansions of an optimistic tree and recommend an action.
pub fn plan<M: SimModel>(
    root_states: Vec<M::State>,
    models: &[M],
    n_actions: usize,
    gamma: f64,
    budget: usize,
) -> Result<PlanResult> {
    if budget == 0 {
        return Err(Error::config("planning budget must be at least 1"));
    }
    let mut tree = PlanTree::new(root_states, models, n_actions, gamma)?;
    for _ in 0..budget {
        tree.expand_best()?;
    }
    Ok(tree.into_result())
}

/// Truncated pessimistic surrogate value of a fixed action sequence:
/// the worst model's discounted return along the sequence.
pub fn surrogate_value<M: SimModel>(
    actions: &[usize],
    root_states: &[M::State],
    models: &[M],
    gamma: f64,
) -> Result<f64> {
    if actions.is_empty() {
        return Err(Error::config("horizon must be at least 1"));
    }
    let mut worst = f64::INFINITY;
    for (m, model) in models.iter().enumerate() {
        let mut state = root_states[m].clone();
        let mut total = 0.0;
        for (n, &a) in actions.iter().enumerate() {
            let (next, reward) = model.step(&state, a)?;
            total += gamma.powi(n as i32) * reward;
            state = next;
        }
        worst = worst.min(total);
    }
    Ok(worst)
}

/// The non-robust aggregation that solves each model independently and
/// takes the worst per-model optimum for every first action. Kept as a
/// comparator: it does not recover max-min planning.
pub fn naive_minmax_action<M: SimModel>(
    root_states: &[M::State],
    models: &[M],
    n_actions: usize,
    gamma: f64,
    depth: usize,
) -> Result<usize> {
    fn best_return<M: SimModel>(
        model: &M,
        state: &M::State,
        n_actions: usize,
        gamma: f64,
        level: usize,
        depth: usize,
    ) -> Result<f64> {
        if level == depth {
            return Ok(0.0);
        }
        let mut best = f64::NEG_INFINITY;
        for a in 0..n_actions {
            let (next, reward) = model.step(state, a)?;
            let tail = best_return(model, &next, n_actions, gamma, level + 1, depth)?;
            best = best.max(gamma.powi(level as i32) * reward + tail);
        }
        Ok(best)
    }

    if depth == 0 {
        return Err(Error::config("depth must be at least 1"));
    }
    let mut best_action = 0usize;
    let mut best_value = f64::NEG_INFINITY;
    for a in 0..n_actions {
        let mut worst = f64::INFINITY;
        for (m, model) in models.iter().enumerate() {
            let (next, reward) = model.step(&root_states[m], a)?;
            let tail = best_return(model, &next, n_actions, gamma, 1, depth)?;
            worst = worst.min(reward + tail);
        }
        if worst > best_value {
            best_value = worst;
            best_action = a;
        }
    }
    Ok(best_action)
}
