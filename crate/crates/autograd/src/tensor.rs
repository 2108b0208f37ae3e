use crate::error::{dim_err, Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(TensorError::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Shape as `(N, C, H, W)`; errors unless the tensor is 4-D.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => dim_err(format!("expected a 4-D tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.as_f64()))
                .collect(),
        }
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        Ok(())
    }

    /// Copy of sample `n` along the leading axis, keeping a leading dim of 1.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let Some((&batch, rest)) = self.shape.split_first() else {
            return dim_err("batch_item on a 0-d tensor");
        };
        if n >= batch {
            return dim_err(format!("batch index {n} out of range for {batch}"));
        }
        let stride: usize = rest.iter().product();
        let mut shape = vec![1];
        shape.extend_from_slice(rest);
        Ok(Tensor {
            shape,
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        })
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat_batch(items: &[Tensor<T>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return dim_err("concat of zero tensors");
        };
        if first.shape.is_empty() {
            return dim_err("concat of 0-d tensors");
        }
        let mut batch = 0;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape.len() != first.shape.len() || t.shape[1..] != first.shape[1..] {
                return dim_err(format!(
                    "concat_batch: {:?} vs {:?}",
                    first.shape, t.shape
                ));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Tensor::new(&shape, data)
    }

    /// Adds a leading axis of size 1.
    pub fn unsqueeze0(mut self) -> Self {
        self.shape.insert(0, 1);
        self
    }
}
