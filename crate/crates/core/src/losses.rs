//! Domain-prompter objectives: the domain-diversity loss over a bank of
//! virtual domain vectors and the prototype-consistency loss over perturbed
//! prototypes. Values and analytic gradients only; nothing is optimized here.
//!
//! Both are InfoNCE losses `mean_i [ -s_ii / tau + logsumexp_j s_ij / tau ]`
//! over a similarity matrix `s_ij = sim(a_i, b_j)`.

use serde::{Deserialize, Serialize};

use crate::embed::Embedding;
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, softmax, Scalar};

pub const DEFAULT_TAU_PROTO: f64 = 2.0;
pub const DEFAULT_TAU_DOMAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKernel {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfoNceTemperatures<T> {
    pub tau_proto: T,
    pub tau_domain: T,
}

impl<T: Scalar> Default for InfoNceTemperatures<T> {
    fn default() -> Self {
        InfoNceTemperatures {
            tau_proto: T::lit(DEFAULT_TAU_PROTO),
            tau_domain: T::lit(DEFAULT_TAU_DOMAIN),
        }
    }
}

impl<T: Scalar> InfoNceTemperatures<T> {
    pub fn new(tau_proto: T, tau_domain: T) -> Result<Self> {
        check_tau(tau_proto)?;
        check_tau(tau_domain)?;
        Ok(InfoNceTemperatures { tau_proto, tau_domain })
    }
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    if tau > T::zero() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(tau.to_f64_lossy()))
    }
}

/// Virtual domain vectors, twice as many as classes by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBank<T> {
    domains: Vec<Embedding<T>>,
}

impl<T: Scalar> DomainBank<T> {
    pub fn new(domains: Vec<Embedding<T>>) -> Result<Self> {
        let dim = domains.first().ok_or(Error::EmptyInput)?.dim();
        if let Some(d) = domains.iter().find(|d| d.dim() != dim) {
            return Err(Error::DimMismatch { expected: dim, got: d.dim() });
        }
        Ok(DomainBank { domains })
    }

    /// Bank size for `n_classes` classes.
    pub fn size_for(n_classes: usize) -> usize {
        2 * n_classes
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domains[0].dim()
    }

    pub fn domains(&self) -> &[Embedding<T>] {
        &self.domains
    }
}

/// `prototype + domain`.
pub fn perturb<T: Scalar>(prototype: &Embedding<T>, domain: &Embedding<T>) -> Result<Embedding<T>> {
    prototype.axpy(T::one(), domain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainLoss<T> {
    pub value: T,
    /// One gradient per domain vector.
    pub grad: Vec<Embedding<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoLoss<T> {
    pub value: T,
    pub grad_prototypes: Vec<Embedding<T>>,
    /// Gradient for every domain in the bank; zero except at the chosen pair.
    pub grad_domains: Vec<Embedding<T>>,
}

/// Domain-diversity loss: each domain is its own positive, every other
/// domain a negative.
pub fn loss_domain<T: Scalar>(bank: &DomainBank<T>, tau_domain: T, kernel: SimKernel) -> Result<DomainLoss<T>> {
    check_tau(tau_domain)?;
    if bank.len() < 2 {
        return Err(Error::InvalidParameter(format!("domain loss needs at least 2 domains, got {}", bank.len())));
    }
    let d: Vec<&[T]> = bank.domains.iter().map(Embedding::as_slice).collect();
    let out = info_nce(&d, &d, tau_domain, kernel)?;
    let grad = out
        .grad_a
        .into_iter()
        .zip(out.grad_b)
        .map(|(a, b)| Embedding::new(add(&a, &b)))
        .collect::<Result<_>>()?;
    Ok(DomainLoss { value: out.value, grad })
}

/// Prototype-consistency loss for the domain pair `(k, m)`: the anchor
/// `p_i + d_k` must pick `p_i + d_m` out of `{p_j + d_m}`.
pub fn loss_proto<T: Scalar>(
    prototypes: &[Embedding<T>],
    bank: &DomainBank<T>,
    pair: (usize, usize),
    tau_proto: T,
    kernel: SimKernel,
) -> Result<ProtoLoss<T>> {
    check_tau(tau_proto)?;
    if prototypes.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "prototype loss needs at least 2 prototypes, got {}",
            prototypes.len()
        )));
    }
    let (k, m) = pair;
    let n_dom = bank.len();
    if k >= n_dom || m >= n_dom {
        return Err(Error::InvalidParameter(format!("domain pair ({k}, {m}) outside bank of {n_dom}")));
    }
    let (dk, dm) = (&bank.domains[k], &bank.domains[m]);
    let anchors = prototypes.iter().map(|p| perturb(p, dk)).collect::<Result<Vec<_>>>()?;
    let cands = prototypes.iter().map(|p| perturb(p, dm)).collect::<Result<Vec<_>>>()?;
    let a: Vec<&[T]> = anchors.iter().map(Embedding::as_slice).collect();
    let b: Vec<&[T]> = cands.iter().map(Embedding::as_slice).collect();
    let out = info_nce(&a, &b, tau_proto, kernel)?;

    let dim = bank.dim();
    let mut gk = vec![T::zero(); dim];
    let mut gm = vec![T::zero(); dim];
    let mut grad_prototypes = Vec::with_capacity(prototypes.len());
    for (ga, gb) in out.grad_a.iter().zip(&out.grad_b) {
        accumulate(&mut gk, ga);
        accumulate(&mut gm, gb);
        grad_prototypes.push(Embedding::new(add(ga, gb))?);
    }
    let mut grad_domains: Vec<Vec<T>> = vec![vec![T::zero(); dim]; n_dom];
    accumulate(&mut grad_domains[k], &gk);
    accumulate(&mut grad_domains[m], &gm);
    Ok(ProtoLoss {
        value: out.value,
        grad_prototypes,
        grad_domains: grad_domains.into_iter().map(Embedding::new).collect::<Result<_>>()?,
    })
}

/// `L_dp = L_domain + L_proto`.
pub fn loss_total_dp<T: Scalar>(value_domain: T, value_proto: T) -> T {
    value_domain + value_proto
}

fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

fn accumulate<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

struct InfoNceOut<T> {
    value: T,
    grad_a: Vec<Vec<T>>,
    grad_b: Vec<Vec<T>>,
}

fn info_nce<T: Scalar>(a: &[&[T]], b: &[&[T]], tau: T, kernel: SimKernel) -> Result<InfoNceOut<T>> {
    let n = a.len();
    let dim = a[0].len();
    let norms = |vs: &[&[T]]| -> Result<Vec<T>> {
        vs.iter()
            .map(|v| {
                if v.len() != dim {
                    return Err(Error::DimMismatch { expected: dim, got: v.len() });
                }
                let nv = dot(v, v).sqrt();
                if kernel == SimKernel::Cosine && !(nv > T::zero()) {
                    return Err(Error::ZeroVector);
                }
                Ok(nv)
            })
            .collect()
    };
    let na = norms(a)?;
    let nb = norms(b)?;
    let sim = |i: usize, j: usize| -> T {
        let raw = dot(a[i], b[j]);
        match kernel {
            SimKernel::Cosine => raw / (na[i] * nb[j]),
            SimKernel::Dot => raw,
        }
    };
    let s: Vec<Vec<T>> = (0..n).map(|i| (0..n).map(|j| sim(i, j)).collect()).collect();

    let nt = T::from_usize_lossy(n);
    let mut value = T::zero();
    let mut grad_a = vec![vec![T::zero(); dim]; n];
    let mut grad_b = vec![vec![T::zero(); dim]; n];
    for i in 0..n {
        let logits: Vec<T> = s[i].iter().map(|&x| x / tau).collect();
        value += log_sum_exp(&logits) - logits[i];
        let p = softmax(&logits);
        for j in 0..n {
            let delta = if i == j { T::one() } else { T::zero() };
            // dL / ds_ij
            let g = (p[j] - delta) / (tau * nt);
            if g == T::zero() {
                continue;
            }
            match kernel {
                SimKernel::Cosine => {
                    let inv = T::one() / (na[i] * nb[j]);
                    let ca = s[i][j] / (na[i] * na[i]);
                    let cb = s[i][j] / (nb[j] * nb[j]);
                    for t in 0..dim {
                        grad_a[i][t] += g * (b[j][t] * inv - ca * a[i][t]);
                        grad_b[j][t] += g * (a[i][t] * inv - cb * b[j][t]);
                    }
                }
                SimKernel::Dot => {
                    for t in 0..dim {
                        grad_a[i][t] += g * b[j][t];
                        grad_b[j][t] += g * a[i][t];
                    }
                }
            }
        }
    }
    Ok(InfoNceOut { value: value / nt, grad_a, grad_b })
}
