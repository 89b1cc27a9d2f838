use crate::{Error, Real, Result, Tensor};

/// Joins a parameter path segment onto a prefix with a dot.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A bundle of named tensors.
///
/// The same type doubles as its own gradient container: `zeros_like` gives a
/// structurally identical value that backward passes accumulate into, and the
/// optimizer walks parameters and gradients in lockstep via `visit`.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn flatten(&self) -> Vec<Real> {
        let mut flat = Vec::with_capacity(self.num_params());
        for (_, t) in self.named() {
            flat.extend_from_slice(t.data());
        }
        flat
    }

    fn load_flat(&mut self, flat: &[Real]) -> Result<()> {
        let mut offset = 0;
        for (_, t) in self.named_mut() {
            let n = t.len();
            let src = flat
                .get(offset..offset + n)
                .ok_or_else(|| Error::shape("flat parameter vector too short"))?;
            t.data_mut().copy_from_slice(src);
            offset += n;
        }
        if offset != flat.len() {
            return Err(Error::shape("flat parameter vector too long"));
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
    }
}

impl Parameters for Tensor {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join_name(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join_name(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(p) = self {
            p.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Some(p) = self {
            p.visit_mut(prefix, out);
        }
    }
}

/// Implements [`Parameters`] for a struct by visiting the listed fields in
/// order, each under its own name.
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::numerics::Parameters for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::Tensor)>) {
                $( $crate::numerics::Parameters::visit(
                    &self.$field, &$crate::numerics::join_name(prefix, stringify!($field)), out); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut $crate::Tensor)>) {
                $( $crate::numerics::Parameters::visit_mut(
                    &mut self.$field, &$crate::numerics::join_name(prefix, stringify!($field)), out); )*
            }
        }
    };
}
pub(crate) use impl_parameters;
