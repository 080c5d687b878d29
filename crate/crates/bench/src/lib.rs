//! Fixtures shared by the benchmarks.

use nfsense::recon::{build_bases, EncodingInputs};
use nfsense::sensmaps::intensity_correction;
use nfsense::simulate::{forward_signal, make_b0, make_phantom, make_spiral, synth_coils, B0Pattern, PhantomKind, SpiralParams};
use nfsense::{Grid, KSpaceFilter, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reconstruction inputs for an `n x n` spiral acquisition with a B0 blob,
/// every voxel unknown.
pub fn spiral_inputs(n: usize, samples: usize, coils: usize, iterations: usize) -> Result<EncodingInputs> {
    let grid = Grid::square_2d(n, 0.22)?;
    let temporal = make_spiral(
        &grid,
        &SpiralParams {
            samples,
            ..SpiralParams::default()
        },
    )?;
    let phantom = make_phantom(&grid, PhantomKind::SheppLike, false);
    let sens = synth_coils(&grid, coils, 0.5)?;
    let b0 = make_b0(&grid, B0Pattern::Blob { peak_rad_s: 150.0, width: 0.3 });
    let voxels: Vec<usize> = (0..grid.len()).collect();
    let spatial = build_bases(&b0, &voxels, &grid, &temporal, 1, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sigma = forward_signal(&phantom.image, &sens.maps, &spatial, &temporal, 0.01, &mut rng)?;
    let intensity = intensity_correction(&sens, &vec![true; grid.len()]);
    Ok(EncodingInputs {
        sigma,
        spatial,
        temporal,
        sens: sens.maps,
        intensity,
        filter: KSpaceFilter::ones(grid.len()),
        grid,
        voxels,
        iterations,
        element_order: Default::default(),
    })
}

