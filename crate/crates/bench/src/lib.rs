//! Fixtures shared by the benchmarks.

use nigra_core::synthdata::{generate_phantom, PhantomSpec};
use nigra_core::{LabelMask, RasterImage};

/// A phantom image and mask of edge `size`.
pub fn phantom(size: usize, index: u64) -> (RasterImage, LabelMask) {
    let spec = PhantomSpec { image_size: size, ..Default::default() };
    let p = generate_phantom(&spec, index).expect("default phantom spec is valid");
    (p.image, p.mask)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixture_has_requested_size() {
        let (img, mask) = super::phantom(64, 0);
        assert_eq!((img.width(), mask.height()), (64, 64));
    }
}
