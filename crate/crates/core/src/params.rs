//! Named weight collections and the textual checkpoint format.
//!
//! A checkpoint is a UTF-8 text file:
//!
//! ```text
//! # lease checkpoint v1
//! tensor <name> <rank> <d0> <d1> ...
//! <values, whitespace separated>
//! ```
//!
//! Values are written in Rust's shortest round-trip form, so a
//! write/read cycle reproduces every bit. Blank lines and `#` comments are
//! ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{GradMap, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, VectorSpace};

const CHECKPOINT_HEADER: &str = "# lease checkpoint v1";

/// Ordered `(name, tensor)` pairs.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

/// [`Params`] bound into a graph, one [`Var`] per entry.
#[derive(Clone, Debug)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no weight named `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects the gradient of every bound entry into a [`Params`].
    pub fn grads(&self, g: &Graph, grads: &GradMap) -> Params {
        Params {
            entries: self
                .names
                .iter()
                .zip(&self.vars)
                .map(|(n, v)| (n.clone(), grads.wrt(g, *v)))
                .collect(),
        }
    }
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adds every entry to `g`, as leaves when `trainable` and constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            vars.push(if trainable { g.leaf(t.clone())? } else { g.constant(t.clone())? });
        }
        Ok(BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            vars,
        })
    }

    /// All values concatenated in entry order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Inverse of [`Params::flatten`], reusing this collection's names and shapes.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.numel() {
            return Err(Error::InvalidArgument(format!(
                "unflatten: expected {} values, got {}",
                self.numel(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let len = t.numel();
                let part = Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + len].to_vec());
                offset += len;
                (n.clone(), part)
            })
            .collect();
        Ok(Params { entries })
    }

    fn zip_entries(&self, other: &Params, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Params {
        assert_eq!(self.entries.len(), other.entries.len(), "parameter sets differ in length");
        Params {
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|((n, a), (m, b))| {
                    assert_eq!(n, m, "parameter sets differ in layout");
                    (n.clone(), f(a, b))
                })
                .collect(),
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::from(CHECKPOINT_HEADER);
        out.push('\n');
        for (name, t) in &self.entries {
            let _ = write!(out, "tensor {} {}", name, t.shape().len());
            for d in t.shape() {
                let _ = write!(out, " {d}");
            }
            out.push('\n');
            let vals: Vec<String> = t.data().iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Params> {
        let err = |line: usize, message: String| Error::Format { what: "checkpoint", line, message };
        let mut params = Params::new();
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        while let Some((ln, header)) = lines.next() {
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(err(ln, format!("expected `tensor <name> <rank> <dims>`, got `{header}`")));
            }
            let name = parts.next().ok_or_else(|| err(ln, "missing tensor name".into()))?;
            let rank: usize = parts
                .next()
                .and_then(|r| r.parse().ok())
                .ok_or_else(|| err(ln, "missing or invalid rank".into()))?;
            let shape: Vec<usize> = parts
                .map(|d| d.parse().map_err(|_| err(ln, format!("invalid extent `{d}`"))))
                .collect::<Result<_>>()?;
            if shape.len() != rank {
                return Err(err(ln, format!("rank {rank} but {} extents", shape.len())));
            }
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if n == 0 {
                Vec::new()
            } else {
                let (vln, vals) = lines.next().ok_or_else(|| err(ln, format!("missing values for `{name}`")))?;
                vals.split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|_| err(vln, format!("invalid value `{v}`"))))
                    .collect::<Result<_>>()?
            };
            if data.len() != n {
                return Err(err(ln, format!("`{name}` needs {n} values, found {}", data.len())));
            }
            params.insert(name, Tensor::from_parts(shape, data));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Params> {
        Params::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

impl VectorSpace for Params {
    fn axpy(&self, alpha: f64, other: &Self) -> Self {
        self.zip_entries(other, |a, b| a.axpy(alpha, b))
    }

    fn scale(&self, s: f64) -> Self {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.scale(s))).collect(),
        }
    }

    fn dot(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| a.dot(b))
            .sum()
    }

    fn zeros_like(&self) -> Self {
        Params {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.zeros_like())).collect(),
        }
    }

    fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Declares a domain newtype over [`Params`] that derefs to it and forwards
/// the [`VectorSpace`] operations.
macro_rules! params_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub $crate::params::Params);

        impl std::ops::Deref for $name {
            type Target = $crate::params::Params;
            fn deref(&self) -> &Self::Target {
                &self.0
            }
        }

        impl std::ops::DerefMut for $name {
            fn deref_mut(&mut self) -> &mut Self::Target {
                &mut self.0
            }
        }

        impl From<$crate::params::Params> for $name {
            fn from(p: $crate::params::Params) -> Self {
                $name(p)
            }
        }

        impl $crate::tensor::VectorSpace for $name {
            fn axpy(&self, alpha: f64, other: &Self) -> Self {
                $name(self.0.axpy(alpha, &other.0))
            }
            fn scale(&self, s: f64) -> Self {
                $name(self.0.scale(s))
            }
            fn dot(&self, other: &Self) -> f64 {
                self.0.dot(&other.0)
            }
            fn zeros_like(&self) -> Self {
                $name(self.0.zeros_like())
            }
            fn all_finite(&self) -> bool {
                self.0.all_finite()
            }
        }
    };
}
pub(crate) use params_newtype;

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn checkpoint_rejects_malformed_input() {
        assert!(Params::from_checkpoint_str("tensor w 2 2 2\n1 2 3\n").is_err());
        assert!(Params::from_checkpoint_str("weights w 1 1\n1\n").is_err());
        assert!(Params::from_checkpoint_str("tensor w 2 2\n1 2\n").is_err());
        assert!(Params::from_checkpoint_str("tensor w 1 2\n1 x\n").is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let mut p = Params::new();
        p.insert("a", Tensor::from_vec(vec![1.0, 2.0]));
        p.insert("b", Tensor::full(&[2, 2], 3.0));
        let flat = p.flatten();
        assert_eq!(flat.len(), 6);
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert!(p.unflatten(&flat[1..]).is_err());
    }

    proptest! {
        #[test]
        fn checkpoint_roundtrip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::ZERO, 1..24),
            split in 0usize..24,
        ) {
            let split = split.min(vals.len());
            let mut p = Params::new();
            p.insert("cell0.edge3.conv", Tensor::from_vec(vals[..split].to_vec()));
            p.insert("head.bias", Tensor::new(vec![1, vals.len() - split], vals[split..].to_vec()).unwrap());
            let back = Params::from_checkpoint_str(&p.to_checkpoint_string()).unwrap();
            prop_assert_eq!(back.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.get("head.bias").unwrap().shape(), p.get("head.bias").unwrap().shape());
        }
    }
}
