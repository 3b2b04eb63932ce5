use tslab_autodiff::Tensor;

/// A labelled image with pixels in `[0, 1]`, shape `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub image: Tensor<f32>,
}
