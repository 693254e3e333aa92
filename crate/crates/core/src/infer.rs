//! Whole-wafer rendering with a trained network.

use crate::error::{Error, Result};
use crate::nn::{cad_tensor, to_rgb, Mode, Tensor, UNet};
use crate::palette::Palette;
use crate::raster::{CadStack, PatchRegion, RasterImage};

pub const DEFAULT_TILE: usize = 256;
pub const DEFAULT_BATCH: usize = 20;

/// Mirror index without edge repetition (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// CAD tile at `(y0, x0)`, filled beyond the raster by reflection.
fn tile_input(cad: &CadStack, y0: usize, x0: usize, tile: usize) -> Tensor {
    let (h, w) = cad.dims();
    if y0 + tile <= h && x0 + tile <= w {
        let region = PatchRegion::new(x0, y0, tile, tile);
        return cad_tensor(&cad.extract(&region).expect("tile inside raster"));
    }
    let layers = cad.layer_count();
    let mut data = Vec::with_capacity(layers * tile * tile);
    for l in 0..layers {
        let plane = cad.layer(l);
        for ty in 0..tile {
            let y = reflect((y0 + ty) as isize, h);
            for tx in 0..tile {
                let x = reflect((x0 + tx) as isize, w);
                data.push(plane[y * w + x] as f64);
            }
        }
    }
    Tensor::from_vec(1, layers, tile, tile, data)
}

/// Renders the whole CAD stack tile by tile (`tile` must be a multiple of 8),
/// running `batch` tiles per forward pass with frozen normalization statistics.
pub fn infer(
    model: &mut UNet,
    cad: &CadStack,
    palette: Option<&Palette>,
    tile: usize,
    batch: usize,
) -> Result<RasterImage> {
    if tile == 0 || tile % 8 != 0 {
        return Err(Error::IndivisibleSize {
            height: tile,
            width: tile,
            divisor: 8,
        });
    }
    if batch == 0 {
        return Err(Error::InvalidArgument("inference batch must be positive".into()));
    }
    if cad.layer_count() != model.config().k_in {
        return Err(Error::LayerCountMismatch {
            expected: model.config().k_in,
            found: cad.layer_count(),
        });
    }
    let (h, w) = cad.dims();
    let origins: Vec<(usize, usize)> = (0..h)
        .step_by(tile)
        .flat_map(|y| (0..w).step_by(tile).map(move |x| (y, x)))
        .collect();
    let mode = model.config().mode;
    let mut out = RasterImage::filled(h, w, [0.0; 3]);
    for group in origins.chunks(batch) {
        let inputs: Vec<Tensor> = group.iter().map(|&(y, x)| tile_input(cad, y, x, tile)).collect();
        let logits = model.run(&Tensor::stack(&inputs), Mode::Infer)?;
        for (i, &(y0, x0)) in group.iter().enumerate() {
            let rendered = to_rgb(&logits, i, mode, palette)?;
            let region = PatchRegion::new(0, 0, tile.min(w - x0), tile.min(h - y0));
            out.paste(&rendered.extract(&region)?, y0, x0)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{UNetConfig, UNetMode};
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn output_dims_and_batch_invariance() {
        let out = generate(&SynthConfig {
            size: 256,
            ..SynthConfig::default()
        })
        .unwrap();
        let cad = out.cad.extract(&PatchRegion::new(0, 0, 200, 136)).unwrap();
        let config = UNetConfig {
            mode: UNetMode::Regression,
            k_in: 5,
            k_out: 3,
            widths: [4, 4, 8, 8],
        };
        let mut net = UNet::new(config, 2).unwrap();
        let a = infer(&mut net, &cad, None, 64, 1).unwrap();
        let b = infer(&mut net, &cad, None, 64, 20).unwrap();
        assert_eq!(a.dims(), (136, 200));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_tiles_and_layer_counts() {
        let cad = CadStack::empty(16, 16, 3);
        let mut net = UNet::new(UNetConfig::regression(5).with_widths([2, 2, 2, 2]), 0).unwrap();
        assert!(matches!(infer(&mut net, &cad, None, 16, 1), Err(Error::LayerCountMismatch { .. })));
        let cad = CadStack::empty(16, 16, 5);
        assert!(matches!(infer(&mut net, &cad, None, 12, 1), Err(Error::IndivisibleSize { .. })));
    }
}
