//! Internal numerics shared by fitting, scores, and information: log-prob
//! tables over the quadrature grid, posterior expected counts, per-block
//! Newton M-steps, and gradient contractions.

use nalgebra::{DMatrix, DVector};

use crate::data::ResponseMatrix;
use crate::error::{Error, Result};
use crate::model::probs_internal::{item_prob_grads, item_probs_raw, sigmoid};
use crate::model::{Covariance, ItemParams, Link, ModelSpec, ParamLayout, Unpacked};
use crate::model::{PROB_CEIL, PROB_FLOOR};
use crate::quadrature::{build_grid, standard_grid, QuadratureGrid};

/// Posterior quantities from one E-step pass.
pub(crate) struct EStep {
    pub casewise_ll: Vec<f64>,
    pub total_ll: f64,
    /// Expected response counts, laid out `[node][item][category]`.
    pub counts: Vec<f64>,
    /// Total posterior mass per node.
    pub node_mass: Vec<f64>,
}

/// An independent M-step parameter block: items coupled through shared
/// slope classes, together with the packed indices they own.
pub(crate) struct Block {
    pub items: Vec<usize>,
    /// block coordinate -> packed index
    pub packed: Vec<usize>,
    /// per item (parallel to `items`): local parameter -> block coordinate
    /// (None for fixed slopes). Local order is [slopes, intercepts].
    pub local_map: Vec<Vec<Option<usize>>>,
}

pub(crate) struct Evaluator<'a> {
    pub spec: &'a ModelSpec,
    pub layout: ParamLayout,
    pub data: &'a ResponseMatrix,
    pub q_per_dim: usize,
    /// category offset of each item into a node's slice
    cat_off: Vec<usize>,
    total_cats: usize,
    link: Link,
    /// per item: local parameter -> packed index (None for fixed slopes)
    local_to_packed: Vec<Vec<Option<usize>>>,
    /// canonical grid; rescaled per call when the variance is free
    base_grid: QuadratureGrid,
}

impl<'a> Evaluator<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a ResponseMatrix, q_per_dim: usize) -> Result<Self> {
        spec.validate()?;
        spec.matches_data(data)?;
        let layout = spec.layout();
        let mut cat_off = Vec::with_capacity(spec.n_items());
        let mut total = 0usize;
        for &k in &spec.categories {
            cat_off.push(total);
            total += k;
        }
        let local_to_packed: Vec<Vec<Option<usize>>> = (0..spec.n_items())
            .map(|j| {
                let mut v = Vec::with_capacity(spec.n_dims + spec.categories[j] - 1);
                for m in 0..spec.n_dims {
                    v.push(layout.slope_index(j, m));
                }
                for k in 0..spec.categories[j] - 1 {
                    v.push(Some(layout.intercept_index(j, k)));
                }
                v
            })
            .collect();
        let base_grid = match &spec.covariance {
            Covariance::FreeVariance => standard_grid(q_per_dim, 1)?,
            Covariance::Identity => standard_grid(q_per_dim, spec.n_dims)?,
            cov @ Covariance::Fixed(_) => {
                build_grid(q_per_dim, spec.n_dims, &cov.matrix(spec.n_dims, None))?
            }
        };
        Ok(Self {
            spec,
            layout,
            data,
            q_per_dim,
            cat_off,
            total_cats: total,
            link: spec.link(),
            local_to_packed,
            base_grid,
        })
    }

    pub fn grid_for(&self, unpacked: &Unpacked) -> Result<QuadratureGrid> {
        match &self.spec.covariance {
            Covariance::FreeVariance => {
                let var = unpacked.variance.unwrap_or(1.0);
                if !(var.is_finite() && var > 0.0) {
                    return Err(Error::NotPositiveDefinite);
                }
                Ok(self.base_grid.scaled(var.sqrt()))
            }
            _ => Ok(self.base_grid.clone()),
        }
    }

    /// Clamped log-probability tables `[node][item][category]`.
    /// Fails when parameters are invalid for the link.
    fn log_prob_tables(&self, unpacked: &Unpacked, grid: &QuadratureGrid) -> Result<Vec<f64>> {
        let q_total = grid.len();
        let mut table = vec![0.0f64; q_total * self.total_cats];
        let mut buf = vec![0.0f64; self.spec.categories.iter().copied().max().unwrap()];
        for (j, item) in unpacked.items.iter().enumerate() {
            let k = self.spec.categories[j];
            for q in 0..q_total {
                let theta = grid.node(q);
                let ok = item_probs_raw(self.link, item, self.spec.guessing, theta, &mut buf[..k]);
                if !ok {
                    return Err(Error::ParameterValidity {
                        item: j,
                        msg: "thresholds not ordered at a quadrature node".into(),
                    });
                }
                let base = q * self.total_cats + self.cat_off[j];
                for kk in 0..k {
                    table[base + kk] = buf[kk].clamp(PROB_FLOOR, PROB_CEIL).ln();
                }
            }
        }
        Ok(table)
    }

    /// Casewise marginal log-likelihoods only (no posterior accumulation).
    pub fn loglik(&self, unpacked: &Unpacked) -> Result<(f64, Vec<f64>)> {
        let grid = self.grid_for(unpacked)?;
        let table = self.log_prob_tables(unpacked, &grid)?;
        let q_total = grid.len();
        let logw: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();
        let n = self.data.n_persons();
        let mut casewise = Vec::with_capacity(n);
        let mut acc = vec![0.0f64; q_total];
        for i in 0..n {
            let row = self.data.row(i);
            for (q, a) in acc.iter_mut().enumerate() {
                let base = q * self.total_cats;
                let mut s = logw[q];
                for (j, &x) in row.iter().enumerate() {
                    s += table[base + self.cat_off[j] + x as usize];
                }
                *a = s;
            }
            let ll = logsumexp(&acc);
            if !ll.is_finite() {
                return Err(Error::ZeroLikelihood { person: i });
            }
            casewise.push(ll);
        }
        Ok((casewise.iter().sum(), casewise))
    }

    /// Full E-step: casewise log-likelihoods plus expected counts and node
    /// masses under the posterior over nodes.
    pub fn estep(&self, unpacked: &Unpacked, grid: &QuadratureGrid) -> Result<EStep> {
        let table = self.log_prob_tables(unpacked, grid)?;
        let q_total = grid.len();
        let logw: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();
        let n = self.data.n_persons();
        let mut counts = vec![0.0f64; q_total * self.total_cats];
        let mut node_mass = vec![0.0f64; q_total];
        let mut casewise = Vec::with_capacity(n);
        let mut acc = vec![0.0f64; q_total];
        for i in 0..n {
            let row = self.data.row(i);
            for (q, a) in acc.iter_mut().enumerate() {
                let base = q * self.total_cats;
                let mut s = logw[q];
                for (j, &x) in row.iter().enumerate() {
                    s += table[base + self.cat_off[j] + x as usize];
                }
                *a = s;
            }
            let ll = logsumexp(&acc);
            if !ll.is_finite() {
                return Err(Error::ZeroLikelihood { person: i });
            }
            casewise.push(ll);
            for q in 0..q_total {
                let post = (acc[q] - ll).exp();
                if post > 0.0 {
                    node_mass[q] += post;
                    let base = q * self.total_cats;
                    for (j, &x) in row.iter().enumerate() {
                        counts[base + self.cat_off[j] + x as usize] += post;
                    }
                }
            }
        }
        Ok(EStep { total_ll: casewise.iter().sum(), casewise_ll: casewise, counts, node_mass })
    }

    /// Partition the packed item parameters into independent M-step blocks.
    /// Items coupled by a shared slope class share a block.
    pub fn blocks(&self) -> Vec<Block> {
        let j = self.spec.n_items();
        let mut parent: Vec<usize> = (0..j).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        // union items sharing a packed slope index
        let mut owner: Vec<(usize, usize)> = Vec::new(); // (packed idx, item)
        for jj in 0..j {
            for m in 0..self.spec.n_dims {
                if let Some(p) = self.layout.slope_index(jj, m) {
                    if let Some(&(_, other)) = owner.iter().find(|(pp, _)| *pp == p) {
                        let a = find(&mut parent, jj);
                        let b = find(&mut parent, other);
                        parent[a] = b;
                    } else {
                        owner.push((p, jj));
                    }
                }
            }
        }
        let mut blocks: Vec<Block> = Vec::new();
        let mut root_block: Vec<(usize, usize)> = Vec::new();
        for jj in 0..j {
            let r = find(&mut parent, jj);
            let bi = match root_block.iter().find(|(rr, _)| *rr == r) {
                Some(&(_, b)) => b,
                None => {
                    let b = blocks.len();
                    blocks.push(Block { items: Vec::new(), packed: Vec::new(), local_map: Vec::new() });
                    root_block.push((r, b));
                    b
                }
            };
            blocks[bi].items.push(jj);
        }
        for block in &mut blocks {
            for &jj in &block.items {
                let mut map = Vec::new();
                for p in &self.local_to_packed[jj] {
                    match p {
                        None => map.push(None),
                        Some(pi) => {
                            let bc = match block.packed.iter().position(|x| x == pi) {
                                Some(existing) => existing,
                                None => {
                                    block.packed.push(*pi);
                                    block.packed.len() - 1
                                }
                            };
                            map.push(Some(bc));
                        }
                    }
                }
                block.local_map.push(map);
            }
        }
        blocks
    }

    /// Expected complete-data log-likelihood of one block, with optional
    /// gradient and Hessian in block coordinates. `None` when the proposal
    /// is invalid for the link.
    fn block_q(
        &self,
        block: &Block,
        items: &[ItemParams],
        grid: &QuadratureGrid,
        counts: &[f64],
        derivs: Option<(&mut DVector<f64>, &mut DMatrix<f64>)>,
    ) -> Option<f64> {
        let mut qval = 0.0;
        let mut g_h = derivs;
        let max_k = self.spec.categories.iter().copied().max().unwrap();
        let mut probs = vec![0.0f64; max_k];
        for (bi, &jj) in block.items.iter().enumerate() {
            let item = &items[bi];
            let k = self.spec.categories[jj];
            let m = item.slopes.len();
            let map = &block.local_map[bi];
            for q in 0..grid.len() {
                let theta = grid.node(q);
                let base = q * self.total_cats + self.cat_off[jj];
                let r = &counts[base..base + k];
                if r.iter().all(|&c| c == 0.0) {
                    continue;
                }
                let ok =
                    item_probs_raw(self.link, item, self.spec.guessing, theta, &mut probs[..k]);
                if !ok {
                    return None;
                }
                for kk in 0..k {
                    let p = probs[kk].clamp(PROB_FLOOR, PROB_CEIL);
                    qval += r[kk] * p.ln();
                }
                if let Some((grad, hess)) = g_h.as_mut() {
                    accumulate_q_derivs(
                        self.link, item, theta, &probs[..k], r, m, map, grad, hess,
                    );
                }
            }
        }
        qval.is_finite().then_some(qval)
    }

    /// Maximize the expected complete-data log-likelihood of one block by
    /// Newton-Raphson with step halving. Updates `values` in place.
    pub fn newton_block(
        &self,
        block: &Block,
        values: &mut [f64],
        grid: &QuadratureGrid,
        counts: &[f64],
        max_iter: usize,
    ) -> Result<()> {
        let b = block.packed.len();
        if b == 0 {
            return Ok(());
        }
        let gather_items = |values: &[f64]| -> Vec<ItemParams> {
            let up = self.layout.unpack(values);
            block.items.iter().map(|&jj| up.items[jj].clone()).collect()
        };
        let mut items = gather_items(values);
        let mut grad = DVector::zeros(b);
        let mut hess = DMatrix::zeros(b, b);
        let mut q0 = match self.block_q(block, &items, grid, counts, None) {
            Some(v) => v,
            None => {
                return Err(Error::MStepFailure {
                    block: block.items[0],
                    msg: "invalid parameters entering the M-step".into(),
                })
            }
        };
        for _ in 0..max_iter {
            grad.fill(0.0);
            hess.fill(0.0);
            if self
                .block_q(block, &items, grid, counts, Some((&mut grad, &mut hess)))
                .is_none()
            {
                return Err(Error::MStepFailure {
                    block: block.items[0],
                    msg: "invalid parameters during the M-step".into(),
                });
            }
            // solve (-H) delta = g; escalate a ridge if the factorization fails
            let mut delta = None;
            let mut ridge = 0.0;
            for _ in 0..8 {
                let mut a = -&hess;
                if ridge > 0.0 {
                    for d in 0..b {
                        a[(d, d)] += ridge;
                    }
                }
                if let Some(chol) = a.cholesky() {
                    delta = Some(chol.solve(&grad));
                    break;
                }
                ridge = if ridge == 0.0 { 1e-4 } else { ridge * 100.0 };
            }
            let Some(delta) = delta else {
                return Err(Error::MStepFailure {
                    block: block.items[0],
                    msg: "Hessian factorization failed".into(),
                });
            };
            // cap absurd steps, then halve until the objective improves
            let mut scale = 1.0f64;
            let max_step = delta.amax();
            if max_step > 5.0 {
                scale = 5.0 / max_step;
            }
            let mut accepted = false;
            for _ in 0..30 {
                let mut trial = values.to_vec();
                for (c, &p) in block.packed.iter().enumerate() {
                    trial[p] += scale * delta[c];
                }
                let trial_items = {
                    let up = self.layout.unpack(&trial);
                    block
                        .items
                        .iter()
                        .map(|&jj| up.items[jj].clone())
                        .collect::<Vec<_>>()
                };
                if let Some(q1) = self.block_q(block, &trial_items, grid, counts, None) {
                    if q1 >= q0 - 1e-12 * (1.0 + q0.abs()) {
                        values.copy_from_slice(&trial);
                        items = trial_items;
                        let improved = q1 - q0;
                        q0 = q1;
                        accepted = true;
                        if scale * max_step < 1e-10 || improved.abs() < 1e-12 * (1.0 + q0.abs())
                        {
                            return Ok(());
                        }
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                // no ascent direction left at this resolution; the block is
                // at (numerical) optimum for this cycle
                return Ok(());
            }
            if scale * max_step < 1e-9 {
                return Ok(());
            }
        }
        Ok(())
    }

    /// Tables of per-category log-probability gradients with respect to an
    /// item's local parameters, `[node][item][category][local]`, flattened
    /// with per-item strides.
    fn score_tables(
        &self,
        unpacked: &Unpacked,
        grid: &QuadratureGrid,
    ) -> Result<(Vec<f64>, Vec<usize>, usize)> {
        // per-item offset within one node's slab, in f64s
        let m = self.spec.n_dims;
        let mut item_off = Vec::with_capacity(self.spec.n_items());
        let mut slab = 0usize;
        for &k in &self.spec.categories {
            item_off.push(slab);
            slab += k * (m + k - 1);
        }
        let mut table = vec![0.0f64; grid.len() * slab];
        let max_k = self.spec.categories.iter().copied().max().unwrap();
        let mut probs = vec![0.0f64; max_k];
        for (j, item) in unpacked.items.iter().enumerate() {
            let k = self.spec.categories[j];
            let l = m + k - 1;
            for q in 0..grid.len() {
                let theta = grid.node(q);
                let ok =
                    item_probs_raw(self.link, item, self.spec.guessing, theta, &mut probs[..k]);
                if !ok {
                    return Err(Error::ParameterValidity {
                        item: j,
                        msg: "thresholds not ordered at a quadrature node".into(),
                    });
                }
                let jac = item_prob_grads(self.link, item, self.spec.guessing, theta, &probs[..k]);
                let base = q * slab + item_off[j];
                for kk in 0..k {
                    let p = probs[kk].clamp(PROB_FLOOR, PROB_CEIL);
                    for ll in 0..l {
                        table[base + kk * l + ll] = jac[kk][ll] / p;
                    }
                }
            }
        }
        Ok((table, item_off, slab))
    }

    /// Per-node derivative of the log prior density with respect to the free
    /// variance, when present: `(theta_q^2 / var - 1) / (2 var)`.
    fn variance_score_nodes(&self, unpacked: &Unpacked, grid: &QuadratureGrid) -> Option<Vec<f64>> {
        let var = unpacked.variance?;
        self.layout.variance?;
        Some(
            (0..grid.len())
                .map(|q| {
                    let t = grid.node(q)[0];
                    (t * t / var - 1.0) / (2.0 * var)
                })
                .collect(),
        )
    }

    /// Total score vector (sum of casewise scores) at the given parameters,
    /// through the posterior-expected complete-data gradient.
    pub fn total_score(&self, unpacked: &Unpacked) -> Result<DVector<f64>> {
        let grid = self.grid_for(unpacked)?;
        let es = self.estep(unpacked, &grid)?;
        let (table, item_off, slab) = self.score_tables(unpacked, &grid)?;
        let m = self.spec.n_dims;
        let mut score = DVector::zeros(self.layout.n_params);
        for q in 0..grid.len() {
            let cbase = q * self.total_cats;
            let tbase = q * slab;
            for j in 0..self.spec.n_items() {
                let k = self.spec.categories[j];
                let l = m + k - 1;
                let ibase = tbase + item_off[j];
                for kk in 0..k {
                    let r = es.counts[cbase + self.cat_off[j] + kk];
                    if r == 0.0 {
                        continue;
                    }
                    for (ll, packed) in self.local_to_packed[j].iter().enumerate() {
                        if let Some(p) = packed {
                            score[*p] += r * table[ibase + kk * l + ll];
                        }
                    }
                }
            }
        }
        if let (Some(vidx), Some(hv)) =
            (self.layout.variance, self.variance_score_nodes(unpacked, &grid))
        {
            for q in 0..grid.len() {
                score[vidx] += es.node_mass[q] * hv[q];
            }
        }
        Ok(score)
    }

    /// N x P matrix of casewise score vectors (Louis identity: the
    /// posterior-expected complete-data gradient per person).
    pub fn casewise_scores(&self, unpacked: &Unpacked) -> Result<DMatrix<f64>> {
        let grid = self.grid_for(unpacked)?;
        let table_lp = self.log_prob_tables(unpacked, &grid)?;
        let (table_g, item_off, slab) = self.score_tables(unpacked, &grid)?;
        let hv = self.variance_score_nodes(unpacked, &grid);
        let logw: Vec<f64> = grid.weights().iter().map(|w| w.ln()).collect();
        let n = self.data.n_persons();
        let p = self.layout.n_params;
        let m = self.spec.n_dims;
        let mut scores = DMatrix::zeros(n, p);
        let q_total = grid.len();
        let mut acc = vec![0.0f64; q_total];
        let mut srow = vec![0.0f64; p];
        for i in 0..n {
            let row = self.data.row(i);
            for (q, a) in acc.iter_mut().enumerate() {
                let base = q * self.total_cats;
                let mut s = logw[q];
                for (j, &x) in row.iter().enumerate() {
                    s += table_lp[base + self.cat_off[j] + x as usize];
                }
                *a = s;
            }
            let ll = logsumexp(&acc);
            if !ll.is_finite() {
                return Err(Error::ZeroLikelihood { person: i });
            }
            srow.fill(0.0);
            for q in 0..q_total {
                let post = (acc[q] - ll).exp();
                if post == 0.0 {
                    continue;
                }
                let tbase = q * slab;
                for (j, &x) in row.iter().enumerate() {
                    let k = self.spec.categories[j];
                    let l = m + k - 1;
                    let gbase = tbase + item_off[j] + (x as usize) * l;
                    for (ll_i, packed) in self.local_to_packed[j].iter().enumerate() {
                        if let Some(pi) = packed {
                            srow[*pi] += post * table_g[gbase + ll_i];
                        }
                    }
                }
                if let (Some(vidx), Some(hv)) = (self.layout.variance, hv.as_ref()) {
                    srow[vidx] += post * hv[q];
                }
            }
            for (c, &v) in srow.iter().enumerate() {
                scores[(i, c)] = v;
            }
        }
        Ok(scores)
    }

    /// Observed information by central finite differences of the total score
    /// function (the numerical Oakes-identity scheme), symmetrized.
    pub fn observed_information(&self, packed: &[f64]) -> Result<DMatrix<f64>> {
        let p = self.layout.n_params;
        let mut h_mat = DMatrix::zeros(p, p);
        for col in 0..p {
            let h = 1e-4 * packed[col].abs().max(1.0);
            let mut plus = packed.to_vec();
            plus[col] += h;
            let mut minus = packed.to_vec();
            minus[col] -= h;
            let sp = self.total_score(&self.layout.unpack(&plus))?;
            let sm = self.total_score(&self.layout.unpack(&minus))?;
            for r in 0..p {
                h_mat[(r, col)] = (sp[r] - sm[r]) / (2.0 * h);
            }
        }
        // I = -d(score)/d(psi), symmetrized
        let info = (&h_mat + h_mat.transpose()) * (-0.5);
        Ok(info)
    }
}

#[inline]
pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Accumulate the gradient and Hessian of `sum_k r_k log p_k` with respect
/// to an item's local parameters, scattered into block coordinates.
#[allow(clippy::too_many_arguments)]
fn accumulate_q_derivs(
    link: Link,
    item: &ItemParams,
    theta: &[f64],
    probs: &[f64],
    r: &[f64],
    m: usize,
    map: &[Option<usize>],
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
) {
    let k = probs.len();
    let zdim = k - 1;
    match link {
        Link::Cumulative => {
            let at: f64 = item.slopes.iter().zip(theta).map(|(a, t)| a * t).sum();
            // derivative tables of the cumulative sigmoids c_1..c_{K-1}
            let mut d = vec![0.0f64; k + 1];
            let mut dd = vec![0.0f64; k + 1];
            for kk in 1..k {
                let c = sigmoid(item.intercepts[kk - 1] + at);
                d[kk] = c * (1.0 - c);
                dd[kk] = d[kk] * (1.0 - 2.0 * c);
            }
            // z-space gradient and Hessian of the weighted log-likelihood
            let mut gz = vec![0.0f64; zdim];
            let mut hz = vec![0.0f64; zdim * zdim];
            for kk in 0..k {
                let rk = r[kk];
                if rk == 0.0 {
                    continue;
                }
                let p = probs[kk].clamp(PROB_FLOOR, PROB_CEIL);
                // grad p_kk over z: +d[kk] at kk-1, -d[kk+1] at kk
                let inv = 1.0 / p;
                let mut gp = [0.0f64; 2];
                let mut gi = [usize::MAX; 2];
                let mut hp = [0.0f64; 2];
                if kk >= 1 {
                    gi[0] = kk - 1;
                    gp[0] = d[kk];
                    hp[0] = dd[kk];
                }
                if kk + 1 <= zdim {
                    gi[1] = kk;
                    gp[1] = -d[kk + 1];
                    hp[1] = -dd[kk + 1];
                }
                for a in 0..2 {
                    if gi[a] == usize::MAX {
                        continue;
                    }
                    gz[gi[a]] += rk * gp[a] * inv;
                    hz[gi[a] * zdim + gi[a]] += rk * hp[a] * inv;
                    for b in 0..2 {
                        if gi[b] == usize::MAX {
                            continue;
                        }
                        hz[gi[a] * zdim + gi[b]] -= rk * gp[a] * gp[b] * inv * inv;
                    }
                }
            }
            // chain z -> [alpha, beta]: dz_k/dalpha_m = theta_m, dz_k/dbeta_l = delta
            let gz_sum: f64 = gz.iter().sum();
            let mut hz_col = vec![0.0f64; zdim]; // column sums of hz
            let mut hz_all = 0.0f64;
            for a in 0..zdim {
                for b in 0..zdim {
                    hz_col[b] += hz[a * zdim + b];
                    hz_all += hz[a * zdim + b];
                }
            }
            scatter(grad, hess, map, m, zdim, theta, gz_sum, &gz, hz_all, &hz_col, &hz);
        }
        Link::Adjacent => {
            // exponential family: grad = sum r_k (t(k) - E t); hess = -R Cov(t)
            let rtot: f64 = r.iter().sum();
            let mu: f64 = probs.iter().enumerate().map(|(kk, p)| kk as f64 * p).sum();
            let ex2: f64 = probs.iter().enumerate().map(|(kk, p)| (kk as f64).powi(2) * p).sum();
            let var_k = ex2 - mu * mu;
            // tail[l] = P(X > l), sk[l] = E[X 1{X > l}]
            let mut tail = vec![0.0f64; zdim];
            let mut sk = vec![0.0f64; zdim];
            let mut t_acc = 0.0;
            let mut s_acc = 0.0;
            for l in (0..zdim).rev() {
                t_acc += probs[l + 1];
                s_acc += (l + 1) as f64 * probs[l + 1];
                tail[l] = t_acc;
                sk[l] = s_acc;
            }
            let robs_k: f64 = r.iter().enumerate().map(|(kk, rr)| kk as f64 * rr).sum();
            // observed tail counts: sum_k r_k 1{l < k}
            let mut robs_tail = vec![0.0f64; zdim];
            let mut racc = 0.0;
            for l in (0..zdim).rev() {
                racc += r[l + 1];
                robs_tail[l] = racc;
            }
            // gradient in z-ish coordinates: alpha uses k stats, beta uses tails
            let g_alpha_raw = robs_k - rtot * mu;
            let gz: Vec<f64> =
                (0..zdim).map(|l| robs_tail[l] - rtot * tail[l]).collect();
            // covariance pieces
            let mut hz = vec![0.0f64; zdim * zdim];
            for a in 0..zdim {
                for b in 0..zdim {
                    let joint = tail[a.max(b)];
                    hz[a * zdim + b] = -rtot * (joint - tail[a] * tail[b]);
                }
            }
            let hz_cross: Vec<f64> =
                (0..zdim).map(|l| -rtot * (sk[l] - tail[l] * mu)).collect();
            let h_alpha_raw = -rtot * var_k;
            scatter_adjacent(
                grad, hess, map, m, zdim, theta, g_alpha_raw, &gz, h_alpha_raw, &hz_cross, &hz,
            );
        }
        Link::Guessing => {
            // fitting is rejected upstream; nothing to do
        }
    }
}

/// Scatter cumulative-link derivatives: the slope direction is `theta_m`
/// applied to all z coordinates at once.
#[allow(clippy::too_many_arguments)]
fn scatter(
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
    map: &[Option<usize>],
    m: usize,
    zdim: usize,
    theta: &[f64],
    gz_sum: f64,
    gz: &[f64],
    hz_all: f64,
    hz_col: &[f64],
    hz: &[f64],
) {
    for a in 0..m {
        let Some(ca) = map[a] else { continue };
        grad[ca] += theta[a] * gz_sum;
        for b in 0..m {
            if let Some(cb) = map[b] {
                hess[(ca, cb)] += theta[a] * theta[b] * hz_all;
            }
        }
        for l in 0..zdim {
            if let Some(cb) = map[m + l] {
                let v = theta[a] * hz_col[l];
                hess[(ca, cb)] += v;
                hess[(cb, ca)] += v;
            }
        }
    }
    for l in 0..zdim {
        let Some(cl) = map[m + l] else { continue };
        grad[cl] += gz[l];
        for l2 in 0..zdim {
            if let Some(cl2) = map[m + l2] {
                hess[(cl, cl2)] += hz[l * zdim + l2];
            }
        }
    }
}

/// Scatter adjacent-link derivatives, where the slope statistic is
/// `theta_m * k` and the step statistics are tail indicators.
#[allow(clippy::too_many_arguments)]
fn scatter_adjacent(
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
    map: &[Option<usize>],
    m: usize,
    zdim: usize,
    theta: &[f64],
    g_alpha_raw: f64,
    gz: &[f64],
    h_alpha_raw: f64,
    hz_cross: &[f64],
    hz: &[f64],
) {
    for a in 0..m {
        let Some(ca) = map[a] else { continue };
        grad[ca] += theta[a] * g_alpha_raw;
        for b in 0..m {
            if let Some(cb) = map[b] {
                hess[(ca, cb)] += theta[a] * theta[b] * h_alpha_raw;
            }
        }
        for l in 0..zdim {
            if let Some(cb) = map[m + l] {
                let v = theta[a] * hz_cross[l];
                hess[(ca, cb)] += v;
                hess[(cb, ca)] += v;
            }
        }
    }
    for l in 0..zdim {
        let Some(cl) = map[m + l] else { continue };
        grad[cl] += gz[l];
        for l2 in 0..zdim {
            if let Some(cl2) = map[m + l2] {
                hess[(cl, cl2)] += hz[l * zdim + l2];
            }
        }
    }
}
