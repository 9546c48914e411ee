//! Forward and reverse passes: NetVLAD encoding, projection, graph attention
//! layers and the symmetric edge classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{DropoutMode, GatHead, Hyper, ModelParams, NetVladParams};
use super::{GnnError, Real};
use crate::keyframe::DescriptorMatrix;

const NORM_EPS: f64 = 1e-12;
pub const PROB_CLAMP: f64 = 1e-7;

/// Inference is deterministic; training draws dropout masks from `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Train { seed: u64 },
}

/// Projected node features of one keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEncoding<T> {
    pub values: Vec<T>,
    /// Set when the keyframe had no keypoints.
    pub zero: bool,
}

fn t<T: Real>(v: f64) -> T {
    T::from_f64(v).unwrap()
}

fn matvec<T: Real>(w: &[T], n_in: usize, x: &[T], out: &mut [T]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)) {
        *o = row.iter().zip(x).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    }
}

/// `out += W^T g`.
fn mat_t_vec_add<T: Real>(w: &[T], n_in: usize, g: &[T], out: &mut [T]) {
    for (row, &gi) in w.chunks_exact(n_in).zip(g) {
        if gi == T::zero() {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * gi;
        }
    }
}

/// `dw += g x^T`.
fn outer_add<T: Real>(dw: &mut [T], n_in: usize, g: &[T], x: &[T]) {
    for (row, &gi) in dw.chunks_exact_mut(n_in).zip(g) {
        if gi == T::zero() {
            continue;
        }
        for (d, &xv) in row.iter_mut().zip(x) {
            *d += gi * xv;
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

// ---------------------------------------------------------------- NetVLAD

struct NetVladCache<T> {
    rows: usize,
    f: Vec<T>,
    assign: Vec<T>,
    u: Vec<T>,
    block_norms: Vec<T>,
    global_norm: T,
    out: Vec<T>,
}

fn netvlad_cached<T: Real>(desc: &DescriptorMatrix, p: &NetVladParams<T>, hyper: &Hyper) -> Result<NetVladCache<T>, GnnError> {
    let (c, d) = (hyper.n_clusters, hyper.desc_dim);
    let k = desc.rows();
    if k == 0 {
        return Ok(NetVladCache {
            rows: 0,
            f: Vec::new(),
            assign: Vec::new(),
            u: vec![T::zero(); c * d],
            block_norms: vec![T::one(); c],
            global_norm: T::one(),
            out: vec![T::zero(); c * d],
        });
    }
    if desc.cols() != d {
        return Err(GnnError::DimensionMismatch { expected: d, found: desc.cols() });
    }
    if desc.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(GnnError::NonFinite);
    }
    let f: Vec<T> = desc.as_slice().iter().map(|&v| T::from_f32(v).unwrap()).collect();
    let mut assign = vec![T::zero(); k * c];
    let mut v = vec![T::zero(); c * d];
    let mut mass = vec![T::zero(); c];
    for (fk, ak) in f.chunks_exact(d).zip(assign.chunks_exact_mut(c)) {
        matvec(&p.weight, d, fk, ak);
        let mut max = T::neg_infinity();
        for (a, &b) in ak.iter_mut().zip(&p.bias) {
            *a += b;
            max = max.max(*a);
        }
        let mut sum = T::zero();
        for a in ak.iter_mut() {
            *a = (*a - max).exp();
            sum += *a;
        }
        for (j, a) in ak.iter_mut().enumerate() {
            *a /= sum;
            mass[j] += *a;
            for (vv, &x) in v[j * d..(j + 1) * d].iter_mut().zip(fk) {
                *vv += *a * x;
            }
        }
    }
    for j in 0..c {
        for (vv, &cv) in v[j * d..(j + 1) * d].iter_mut().zip(&p.centers[j * d..(j + 1) * d]) {
            *vv -= mass[j] * cv;
        }
    }
    let eps = t::<T>(NORM_EPS);
    let mut block_norms = Vec::with_capacity(c);
    let mut u = v;
    for block in u.chunks_exact_mut(d) {
        let n = (dot(block, block) + eps).sqrt();
        block.iter_mut().for_each(|x| *x /= n);
        block_norms.push(n);
    }
    let global_norm = (dot(&u, &u) + eps).sqrt();
    let out = u.iter().map(|&x| x / global_norm).collect();
    Ok(NetVladCache { rows: k, f, assign, u, block_norms, global_norm, out })
}

fn netvlad_backward<T: Real>(cache: &NetVladCache<T>, dout: &[T], p: &NetVladParams<T>, hyper: &Hyper, g: &mut NetVladParams<T>) {
    if cache.rows == 0 {
        return;
    }
    let (c, d) = (hyper.n_clusters, hyper.desc_dim);
    let proj = dot(&cache.out, dout);
    let du: Vec<T> = dout.iter().zip(&cache.out).map(|(&g, &o)| (g - o * proj) / cache.global_norm).collect();
    let mut dv = vec![T::zero(); c * d];
    for j in 0..c {
        let (uj, duj) = (&cache.u[j * d..(j + 1) * d], &du[j * d..(j + 1) * d]);
        let pj = dot(uj, duj);
        for ((o, &u), &gu) in dv[j * d..(j + 1) * d].iter_mut().zip(uj).zip(duj) {
            *o = (gu - u * pj) / cache.block_norms[j];
        }
    }
    let mut da = vec![T::zero(); c];
    for (fk, ak) in cache.f.chunks_exact(d).zip(cache.assign.chunks_exact(c)) {
        for j in 0..c {
            let dvj = &dv[j * d..(j + 1) * d];
            let cj = &p.centers[j * d..(j + 1) * d];
            da[j] = dvj.iter().zip(fk).zip(cj).fold(T::zero(), |acc, ((&g, &x), &cc)| acc + g * (x - cc));
            // centers: d/dc of -a_kj c_j
            for (gc, &gv) in g.centers[j * d..(j + 1) * d].iter_mut().zip(dvj) {
                *gc -= ak[j] * gv;
            }
        }
        let s = dot(ak, &da);
        for j in 0..c {
            let dz = ak[j] * (da[j] - s);
            g.bias[j] += dz;
            for (gw, &x) in g.weight[j * d..(j + 1) * d].iter_mut().zip(fk) {
                *gw += dz * x;
            }
        }
    }
}

/// Soft-assignment VLAD of one image, block- and globally normalized. An
/// image without keypoints yields the zero vector with `zero` set.
pub fn netvlad_forward<T: Real>(desc: &DescriptorMatrix, params: &NetVladParams<T>, hyper: &Hyper) -> Result<NodeEncoding<T>, GnnError> {
    let cache = netvlad_cached(desc, params, hyper)?;
    Ok(NodeEncoding { values: cache.out, zero: cache.rows == 0 })
}

/// NetVLAD followed by the linear projection.
pub fn encode_node<T: Real>(params: &ModelParams<T>, desc: &DescriptorMatrix) -> Result<NodeEncoding<T>, GnnError> {
    let nv = netvlad_forward(desc, &params.netvlad, &params.hyper)?;
    let mut h = vec![T::zero(); params.hyper.hidden];
    matvec(&params.projection.weight, params.projection.n_in, &nv.values, &mut h);
    h.iter_mut().zip(&params.projection.bias).for_each(|(x, &b)| *x += b);
    Ok(NodeEncoding { values: h, zero: nv.zero })
}

// ------------------------------------------------------------------ GAT

/// Per node: itself first, then its graph neighbors in edge order.
fn neighborhoods(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = (0..n).map(|m| vec![m]).collect();
    for &(a, b) in edges {
        if a != b {
            out[a].push(b);
            out[b].push(a);
        }
    }
    out
}

struct HeadCache<T> {
    z: Vec<Vec<T>>,
    /// Raw attention logits and weights, aligned with the neighborhood lists.
    logits: Vec<Vec<T>>,
    alpha: Vec<Vec<T>>,
}

struct GatCache<T> {
    input: Vec<Vec<T>>,
    nbrs: Vec<Vec<usize>>,
    heads: Vec<HeadCache<T>>,
    pre: Vec<Vec<T>>,
}

fn leaky<T: Real>(x: T, slope: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * slope
    }
}

fn gat_head_forward<T: Real>(x: &[Vec<T>], nbrs: &[Vec<usize>], head: &GatHead<T>, slope: T) -> (HeadCache<T>, Vec<Vec<T>>) {
    let h = head.att_src.len();
    let z: Vec<Vec<T>> = x
        .iter()
        .map(|xm| {
            let mut o = vec![T::zero(); h];
            matvec(&head.weight, h, xm, &mut o);
            o
        })
        .collect();
    let s: Vec<T> = z.iter().map(|zm| dot(&head.att_src, zm)).collect();
    let tt: Vec<T> = z.iter().map(|zm| dot(&head.att_dst, zm)).collect();
    let mut logits = Vec::with_capacity(x.len());
    let mut alpha = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (m, nb) in nbrs.iter().enumerate() {
        let e: Vec<T> = nb.iter().map(|&n| s[m] + tt[n]).collect();
        let act: Vec<T> = e.iter().map(|&v| leaky(v, slope)).collect();
        let max = act.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut w: Vec<T> = act.iter().map(|&v| (v - max).exp()).collect();
        let sum = w.iter().fold(T::zero(), |a, &b| a + b);
        w.iter_mut().for_each(|v| *v /= sum);
        let mut o = vec![T::zero(); h];
        for (&a, &n) in w.iter().zip(nb) {
            for (ov, &zv) in o.iter_mut().zip(&z[n]) {
                *ov += a * zv;
            }
        }
        logits.push(e);
        alpha.push(w);
        out.push(o);
    }
    (HeadCache { z, logits, alpha }, out)
}

fn gat_forward<T: Real>(x: Vec<Vec<T>>, nbrs: Vec<Vec<usize>>, heads: &[GatHead<T>], hyper: &Hyper) -> (GatCache<T>, Vec<Vec<T>>) {
    let slope = t::<T>(hyper.leaky_slope);
    let inv = T::one() / t::<T>(heads.len() as f64);
    let n = x.len();
    let h = hyper.hidden;
    let mut pre = vec![vec![T::zero(); h]; n];
    let mut caches = Vec::with_capacity(heads.len());
    for head in heads {
        let (cache, out) = gat_head_forward(&x, &nbrs, head, slope);
        for (p, o) in pre.iter_mut().zip(&out) {
            for (pv, &ov) in p.iter_mut().zip(o) {
                *pv += ov * inv;
            }
        }
        caches.push(cache);
    }
    let y: Vec<Vec<T>> = pre
        .iter()
        .zip(&x)
        .map(|(p, xm)| {
            p.iter()
                .zip(xm)
                .map(|(&v, &xv)| if hyper.residual { xv + elu(v) } else { elu(v) })
                .collect()
        })
        .collect();
    (GatCache { input: x, nbrs, heads: caches, pre }, y)
}

fn gat_backward<T: Real>(
    cache: &GatCache<T>,
    dy: &[Vec<T>],
    heads: &[GatHead<T>],
    grads: &mut [GatHead<T>],
    hyper: &Hyper,
) -> Vec<Vec<T>> {
    let slope = t::<T>(hyper.leaky_slope);
    let inv = T::one() / t::<T>(heads.len() as f64);
    let h = hyper.hidden;
    let n = dy.len();
    let mut dx: Vec<Vec<T>> = if hyper.residual { dy.to_vec() } else { vec![vec![T::zero(); h]; n] };
    let dpre: Vec<Vec<T>> = dy
        .iter()
        .zip(&cache.pre)
        .map(|(g, p)| g.iter().zip(p).map(|(&gv, &pv)| gv * elu_grad(pv) * inv).collect())
        .collect();
    for ((head, hc), gh) in heads.iter().zip(&cache.heads).zip(grads.iter_mut()) {
        let mut dz = vec![vec![T::zero(); h]; n];
        let mut ds = vec![T::zero(); n];
        let mut dt = vec![T::zero(); n];
        for m in 0..n {
            let nb = &cache.nbrs[m];
            let alpha = &hc.alpha[m];
            let dalpha: Vec<T> = nb.iter().map(|&k| dot(&dpre[m], &hc.z[k])).collect();
            for (&a, &k) in alpha.iter().zip(nb) {
                for (d, &g) in dz[k].iter_mut().zip(&dpre[m]) {
                    *d += a * g;
                }
            }
            let mean = dot(alpha, &dalpha);
            for (i, &k) in nb.iter().enumerate() {
                let mut de = alpha[i] * (dalpha[i] - mean);
                if hc.logits[m][i] <= T::zero() {
                    de *= slope;
                }
                ds[m] += de;
                dt[k] += de;
            }
        }
        for m in 0..n {
            for ((ga, gd), &zv) in gh.att_src.iter_mut().zip(gh.att_dst.iter_mut()).zip(&hc.z[m]) {
                *ga += ds[m] * zv;
                *gd += dt[m] * zv;
            }
            for ((d, &a), &b) in dz[m].iter_mut().zip(&head.att_src).zip(&head.att_dst) {
                *d += ds[m] * a + dt[m] * b;
            }
            outer_add(&mut gh.weight, h, &dz[m], &cache.input[m]);
            mat_t_vec_add(&head.weight, h, &dz[m], &mut dx[m]);
        }
    }
    dx
}

// ------------------------------------------------------------- Edge MLP

struct MlpCache<T> {
    input: Vec<Vec<T>>,
    a: Vec<Vec<T>>,
    b: Vec<Vec<T>>,
}

fn edge_logit<T: Real>(params: &ModelParams<T>, a: &[T], b: &[T]) -> T {
    let mlp = &params.edge_mlp;
    let mut l = mlp.b2[0];
    for (((&x, &y), &c), &w) in a.iter().zip(b).zip(&mlp.b1).zip(&mlp.w2) {
        let u = x + y + c;
        if u > T::zero() {
            l += w * u;
        }
    }
    l
}

fn mlp_forward<T: Real>(params: &ModelParams<T>, x: Vec<Vec<T>>, edges: &[(usize, usize)]) -> (MlpCache<T>, Vec<T>) {
    let m = params.hyper.mlp_hidden;
    let h = params.hyper.hidden;
    let mut a = Vec::with_capacity(x.len());
    let mut b = Vec::with_capacity(x.len());
    for xm in &x {
        let mut va = vec![T::zero(); m];
        let mut vb = vec![T::zero(); m];
        matvec(&params.edge_mlp.w_a, h, xm, &mut va);
        matvec(&params.edge_mlp.w_b, h, xm, &mut vb);
        a.push(va);
        b.push(vb);
    }
    let half = t::<T>(0.5);
    let scores = edges
        .iter()
        .map(|&(p, q)| sigmoid(half * (edge_logit(params, &a[p], &b[q]) + edge_logit(params, &a[q], &b[p]))))
        .collect();
    (MlpCache { input: x, a, b }, scores)
}

fn mlp_backward<T: Real>(
    params: &ModelParams<T>,
    cache: &MlpCache<T>,
    edges: &[(usize, usize)],
    dq: &[T],
    grads: &mut ModelParams<T>,
) -> Vec<Vec<T>> {
    let (m, h) = (params.hyper.mlp_hidden, params.hyper.hidden);
    let n = cache.input.len();
    let mut da = vec![vec![T::zero(); m]; n];
    let mut db = vec![vec![T::zero(); m]; n];
    let half = t::<T>(0.5);
    let mlp = &params.edge_mlp;
    for (&(p, q), &g) in edges.iter().zip(dq) {
        let dl = g * half;
        if dl == T::zero() {
            continue;
        }
        for (s, r) in [(p, q), (q, p)] {
            grads.edge_mlp.b2[0] += dl;
            for i in 0..m {
                let u = cache.a[s][i] + cache.b[r][i] + mlp.b1[i];
                if u > T::zero() {
                    grads.edge_mlp.w2[i] += dl * u;
                    let du = dl * mlp.w2[i];
                    da[s][i] += du;
                    db[r][i] += du;
                    grads.edge_mlp.b1[i] += du;
                }
            }
        }
    }
    let mut dx = vec![vec![T::zero(); h]; n];
    for k in 0..n {
        outer_add(&mut grads.edge_mlp.w_a, h, &da[k], &cache.input[k]);
        outer_add(&mut grads.edge_mlp.w_b, h, &db[k], &cache.input[k]);
        mat_t_vec_add(&mlp.w_a, h, &da[k], &mut dx[k]);
        mat_t_vec_add(&mlp.w_b, h, &db[k], &mut dx[k]);
    }
    dx
}

// ------------------------------------------------------------ Full model

struct Trace<T> {
    netvlad: Vec<NetVladCache<T>>,
    gat: Vec<GatCache<T>>,
    /// Feature masks applied before each GAT layer and before the classifier.
    masks: Vec<Option<Vec<Vec<T>>>>,
    mlp: MlpCache<T>,
    scores: Vec<T>,
}

fn draw_mask<T: Real>(rng: &mut ChaCha8Rng, n: usize, h: usize, p: f64) -> Vec<Vec<T>> {
    let keep = t::<T>(1.0 / (1.0 - p));
    (0..n)
        .map(|_| (0..h).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect())
        .collect()
}

fn apply_mask<T: Real>(x: &mut [Vec<T>], mask: &[Vec<T>]) {
    for (row, mrow) in x.iter_mut().zip(mask) {
        row.iter_mut().zip(mrow).for_each(|(v, &m)| *v *= m);
    }
}

fn drop_edges(rng: &mut ChaCha8Rng, nbrs: &[Vec<usize>], p: f64) -> Vec<Vec<usize>> {
    nbrs.iter()
        .map(|nb| {
            let mut kept = vec![nb[0]];
            kept.extend(nb[1..].iter().copied().filter(|_| rng.random::<f64>() >= p));
            kept
        })
        .collect()
}

fn check_graph(n: usize, edges: &[(usize, usize)]) -> Result<(), GnnError> {
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(GnnError::InvalidEdge { a, b, nodes: n });
    }
    Ok(())
}

fn propagate<T: Real>(
    params: &ModelParams<T>,
    mut x: Vec<Vec<T>>,
    edges: &[(usize, usize)],
    mode: Mode,
) -> (Vec<GatCache<T>>, Vec<Option<Vec<Vec<T>>>>, MlpCache<T>, Vec<T>) {
    let hyper = &params.hyper;
    let n = x.len();
    let base = neighborhoods(n, edges);
    let mut rng = match mode {
        Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Mode::Inference => None,
    };
    let feature_drop = hyper.dropout > 0.0 && hyper.dropout_mode == DropoutMode::Feature;
    let edge_drop = hyper.dropout > 0.0 && hyper.dropout_mode == DropoutMode::Edge;
    let mut masks = Vec::with_capacity(params.gat.len() + 1);
    let mut caches = Vec::with_capacity(params.gat.len());
    let site = |x: &mut Vec<Vec<T>>, rng: &mut Option<ChaCha8Rng>| -> Option<Vec<Vec<T>>> {
        match rng {
            Some(r) if feature_drop => {
                let m = draw_mask(r, n, hyper.hidden, hyper.dropout);
                apply_mask(x, &m);
                Some(m)
            }
            _ => None,
        }
    };
    for layer in &params.gat {
        masks.push(site(&mut x, &mut rng));
        let nbrs = match rng.as_mut() {
            Some(r) if edge_drop => drop_edges(r, &base, hyper.dropout),
            _ => base.clone(),
        };
        let (cache, y) = gat_forward(x, nbrs, &layer.heads, hyper);
        caches.push(cache);
        x = y;
    }
    masks.push(site(&mut x, &mut rng));
    let (mlp, scores) = mlp_forward(params, x, edges);
    (caches, masks, mlp, scores)
}

/// Edge scores in `(0, 1)` from already encoded nodes.
pub fn score_from_encodings<T: Real>(
    params: &ModelParams<T>,
    nodes: &[&NodeEncoding<T>],
    edges: &[(usize, usize)],
    mode: Mode,
) -> Result<Vec<T>, GnnError> {
    check_graph(nodes.len(), edges)?;
    if let Some(bad) = nodes.iter().find(|e| e.values.len() != params.hyper.hidden) {
        return Err(GnnError::DimensionMismatch { expected: params.hyper.hidden, found: bad.values.len() });
    }
    let x = nodes.iter().map(|e| e.values.clone()).collect();
    Ok(propagate(params, x, edges, mode).3)
}

/// Scores every edge of a graph whose nodes carry local descriptors.
pub fn model_forward<T: Real>(
    params: &ModelParams<T>,
    descriptors: &[&DescriptorMatrix],
    edges: &[(usize, usize)],
    mode: Mode,
) -> Result<Vec<T>, GnnError> {
    let enc = descriptors.iter().map(|d| encode_node(params, d)).collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&NodeEncoding<T>> = enc.iter().collect();
    score_from_encodings(params, &refs, edges, mode)
}

fn trace<T: Real>(
    params: &ModelParams<T>,
    descriptors: &[&DescriptorMatrix],
    edges: &[(usize, usize)],
    mode: Mode,
) -> Result<Trace<T>, GnnError> {
    check_graph(descriptors.len(), edges)?;
    let netvlad = descriptors
        .iter()
        .map(|d| netvlad_cached(d, &params.netvlad, &params.hyper))
        .collect::<Result<Vec<_>, _>>()?;
    let x = netvlad
        .iter()
        .map(|c| {
            let mut h = vec![T::zero(); params.hyper.hidden];
            matvec(&params.projection.weight, params.projection.n_in, &c.out, &mut h);
            h.iter_mut().zip(&params.projection.bias).for_each(|(v, &b)| *v += b);
            h
        })
        .collect();
    let (gat, masks, mlp, scores) = propagate(params, x, edges, mode);
    Ok(Trace { netvlad, gat, masks, mlp, scores })
}

/// Mean binary cross-entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Real>(scores: &[T], labels: &[bool]) -> Result<T, GnnError> {
    if scores.len() != labels.len() {
        return Err(GnnError::LengthMismatch { expected: scores.len(), found: labels.len() });
    }
    if scores.is_empty() {
        return Ok(T::zero());
    }
    let (lo, hi) = (t::<T>(PROB_CLAMP), t::<T>(1.0 - PROB_CLAMP));
    let sum = scores.iter().zip(labels).fold(T::zero(), |acc, (&s, &y)| {
        let p = s.max(lo).min(hi);
        acc - if y { p.ln() } else { (T::one() - p).ln() }
    });
    Ok(sum / t::<T>(scores.len() as f64))
}

/// Loss over all edges and its gradient with respect to every parameter.
pub fn loss_and_gradient<T: Real>(
    params: &ModelParams<T>,
    descriptors: &[&DescriptorMatrix],
    edges: &[(usize, usize)],
    labels: &[bool],
    mode: Mode,
) -> Result<(T, ModelParams<T>), GnnError> {
    if labels.len() != edges.len() {
        return Err(GnnError::LengthMismatch { expected: edges.len(), found: labels.len() });
    }
    let tr = trace(params, descriptors, edges, mode)?;
    let loss = bce_loss(&tr.scores, labels)?;
    let mut grads = params.zeros_like();
    if edges.is_empty() {
        return Ok((loss, grads));
    }
    let (lo, hi) = (t::<T>(PROB_CLAMP), t::<T>(1.0 - PROB_CLAMP));
    let inv_n = T::one() / t::<T>(edges.len() as f64);
    let dq: Vec<T> = tr
        .scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            if s < lo || s > hi {
                return T::zero();
            }
            // d/ds of the loss times ds/dq
            let ds = if y { -T::one() / s } else { T::one() / (T::one() - s) };
            ds * s * (T::one() - s) * inv_n
        })
        .collect();
    let mut dx = mlp_backward(params, &tr.mlp, edges, &dq, &mut grads);
    let layers = params.gat.len();
    if let Some(m) = &tr.masks[layers] {
        apply_mask(&mut dx, m);
    }
    for l in (0..layers).rev() {
        dx = gat_backward(&tr.gat[l], &dx, &params.gat[l].heads, &mut grads.gat[l].heads, &params.hyper);
        if let Some(m) = &tr.masks[l] {
            apply_mask(&mut dx, m);
        }
    }
    let proj = &params.projection;
    for (cache, dh) in tr.netvlad.iter().zip(&dx) {
        outer_add(&mut grads.projection.weight, proj.n_in, dh, &cache.out);
        grads.projection.bias.iter_mut().zip(dh).for_each(|(g, &d)| *g += d);
        if cache.rows == 0 {
            continue;
        }
        let mut dout = vec![T::zero(); proj.n_in];
        mat_t_vec_add(&proj.weight, proj.n_in, dh, &mut dout);
        netvlad_backward(cache, &dout, &params.netvlad, &params.hyper, &mut grads.netvlad);
    }
    Ok((loss, grads))
}

/// Side of every piecewise-linear activation (attention LeakyReLU, edge MLP
/// ReLU) for one forward pass. Two parameter vectors with equal patterns lie
/// on the same smooth piece of the loss.
pub fn kink_pattern<T: Real>(
    params: &ModelParams<T>,
    descriptors: &[&DescriptorMatrix],
    edges: &[(usize, usize)],
    mode: Mode,
) -> Result<Vec<bool>, GnnError> {
    let tr = trace(params, descriptors, edges, mode)?;
    let mut out = Vec::new();
    for layer in &tr.gat {
        for head in &layer.heads {
            out.extend(head.logits.iter().flatten().map(|&e| e > T::zero()));
        }
    }
    let mlp = &params.edge_mlp;
    for &(p, q) in edges {
        for (s, r) in [(p, q), (q, p)] {
            for i in 0..params.hyper.mlp_hidden {
                out.push(tr.mlp.a[s][i] + tr.mlp.b[r][i] + mlp.b1[i] > T::zero());
            }
        }
    }
    Ok(out)
}

/// Attention weights of one layer for every node over its neighborhood
/// (itself first), averaged over heads.
pub fn attention_weights<T: Real>(
    params: &ModelParams<T>,
    layer: usize,
    x: &[Vec<T>],
    edges: &[(usize, usize)],
) -> Result<Vec<Vec<T>>, GnnError> {
    check_graph(x.len(), edges)?;
    let heads = &params.gat.get(layer).ok_or(GnnError::InvalidConfig(format!("no layer {layer}")))?.heads;
    let nbrs = neighborhoods(x.len(), edges);
    let slope = t::<T>(params.hyper.leaky_slope);
    let inv = T::one() / t::<T>(heads.len() as f64);
    let mut out: Vec<Vec<T>> = nbrs.iter().map(|nb| vec![T::zero(); nb.len()]).collect();
    for head in heads {
        let (cache, _) = gat_head_forward(x, &nbrs, head, slope);
        for (o, a) in out.iter_mut().zip(&cache.alpha) {
            o.iter_mut().zip(a).for_each(|(v, &w)| *v += w * inv);
        }
    }
    Ok(out)
}

/// Applies one attention layer (inference, no dropout).
pub fn gat_layer_forward<T: Real>(
    params: &ModelParams<T>,
    layer: usize,
    x: Vec<Vec<T>>,
    edges: &[(usize, usize)],
) -> Result<Vec<Vec<T>>, GnnError> {
    check_graph(x.len(), edges)?;
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GnnError::NonFinite);
    }
    let heads = &params.gat.get(layer).ok_or(GnnError::InvalidConfig(format!("no layer {layer}")))?.heads;
    let nbrs = neighborhoods(x.len(), edges);
    Ok(gat_forward(x, nbrs, heads, &params.hyper).1)
}
