use super::{Backbone, BackboneLayer, PyramidError};

/// Halves the backbone stride with the hole algorithm: the last stride-2
/// layer becomes stride 1, and every later conv or pool layer gets its
/// dilation and padding doubled. The transformed output sampled at every
/// second cell equals the original output.
pub fn atrous_transform(backbone: &Backbone) -> Result<Backbone, PyramidError> {
    let last = backbone
        .layers
        .iter()
        .rposition(|l| l.stride() == 2)
        .ok_or_else(|| PyramidError::Backbone("no stride-2 layer to convert".into()))?;
    let mut layers = backbone.layers.clone();
    match &mut layers[last] {
        BackboneLayer::Conv(p) => p.stride = 1,
        BackboneLayer::MaxPool(p) => p.stride = 1,
        BackboneLayer::Relu => unreachable!("relu has stride 1"),
    }
    for layer in &mut layers[last + 1..] {
        match layer {
            BackboneLayer::Conv(p) => {
                p.dilation *= 2;
                p.padding *= 2;
            }
            BackboneLayer::MaxPool(p) => {
                p.dilation *= 2;
                p.padding *= 2;
            }
            BackboneLayer::Relu => {}
        }
    }
    Backbone::new(layers)
}
