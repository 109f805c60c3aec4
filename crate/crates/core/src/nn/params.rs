use ndarray::{ArrayBase, Dimension, OwnedRepr};

pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Anything holding named trainable tensors. Visiting order is stable and
/// defines the layout used by the optimizer and the checkpoint manifest.
pub trait Parameterized {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>);

    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn zero_params(&mut self) {
        for p in self.params_mut() {
            p.data.fill(0.0);
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// `self += scale * other`, tensor by tensor. Both sides must share a layout.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let src = other.params();
        for (dst, src) in self.params_mut().into_iter().zip(src) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<D: Dimension> Parameterized for ArrayBase<OwnedRepr<f64>, D> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        out.push(ParamView {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("parameters are kept in standard layout"),
        });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        let shape = self.shape().to_vec();
        out.push(ParamViewMut {
            name: prefix.to_string(),
            shape,
            data: self.as_slice_mut().expect("parameters are kept in standard layout"),
        });
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.collect_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        if let Some(inner) = self {
            inner.collect(prefix, out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        if let Some(inner) = self {
            inner.collect_mut(prefix, out);
        }
    }
}

/// Implements [`Parameterized`] for a struct by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_parameterized {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Parameterized for $ty {
            fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<$crate::nn::ParamView<'a>>) {
                $( $crate::nn::Parameterized::collect(&self.$field, &$crate::nn::join_name(prefix, stringify!($field)), out); )*
            }
            fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<$crate::nn::ParamViewMut<'a>>) {
                $( $crate::nn::Parameterized::collect_mut(&mut self.$field, &$crate::nn::join_name(prefix, stringify!($field)), out); )*
            }
        }
    };
}
