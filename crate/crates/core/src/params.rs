//! Named flat views over trainable tensors, shared by the optimizer and the
//! checkpoint format.

/// A set of named parameter groups exposed as contiguous slices in a fixed
/// canonical order.
pub trait ParamGroups {
    fn groups(&self) -> Vec<(String, &[f64])>;
    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_values(&self) -> usize {
        self.groups().iter().map(|(_, s)| s.len()).sum()
    }
}

impl ParamGroups for Vec<f64> {
    fn groups(&self) -> Vec<(String, &[f64])> {
        vec![("values".to_string(), self.as_slice())]
    }

    fn groups_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![("values".to_string(), self.as_mut_slice())]
    }
}
