use std::fmt;

use crate::error::{Error, Result};

/// A 1-based class label `y ∈ {1, …, N}`.
///
/// Digit value `k` of an MNIST-style dataset is class `k + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Class(usize);

impl Class {
    pub fn new(label: usize, num_classes: usize) -> Result<Self> {
        if label == 0 || label > num_classes {
            return Err(Error::InvalidArgument(format!("class {label} out of range 1..={num_classes}")));
        }
        Ok(Class(label))
    }

    /// Class from a 0-based position (digit value, logit column).
    pub fn from_index(index: usize) -> Self {
        Class(index + 1)
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// 0-based position of this class.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds() {
        assert!(Class::new(0, 10).is_err());
        assert!(Class::new(11, 10).is_err());
        let c = Class::new(10, 10).unwrap();
        assert_eq!((c.get(), c.index()), (10, 9));
        assert_eq!(Class::from_index(0).get(), 1);
    }
}
