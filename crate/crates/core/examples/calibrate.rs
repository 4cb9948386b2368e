use emc_recon::emc::*;
use emc_recon::metrics::*;
use emc_recon::rotations::*;
use emc_recon::synthetic::*;

fn symmetry_group() -> Vec<Quaternion> {
    vec![
        Quaternion::identity(),
        Quaternion::new(0.0, 1.0, 0.0, 0.0).unwrap(),
        Quaternion::new(0.0, 0.0, 1.0, 0.0).unwrap(),
        Quaternion::new(0.0, 0.0, 0.0, 1.0).unwrap(),
    ]
}

fn main() {
    let t0 = std::time::Instant::now();
    let spec = PhantomSpec::reference(64);
    let truth = build_phantom(&spec).unwrap();
    let rec_rots = random_rotation_set(200, 55).unwrap();
    let frames = generate_noiseless_frames(&truth, rec_rots.quaternions()).unwrap();
    let frames = apply_beamstop_frames(frames, 8.0).unwrap();
    let scale = fluence_scale_for_peak(&frames, 1000.0).unwrap();
    let frames = frames.scaled(scale);
    let truth_scaled = truth.map(|v| v * scale);
    let grid = sample_rotation_grid(4).unwrap();
    let spacing = grid.mean_nearest_neighbor_spacing();
    let sym = symmetry_group();

    // pure E-step diagnostic: slices of the exact truth
    let slices = expand(&truth_scaled, &grid, frames.detector()).unwrap();
    let fl = FluenceMatrix::ones(grid.len(), frames.n_frames());
    let resp = e_step(&frames, &slices, &fl, grid.weights()).unwrap();
    let modes = resp.modes();
    let mut hist = [0usize; 8];
    let mut ok = 0;
    for (k, &j) in modes.iter().enumerate() {
        let qm = grid.quaternions()[j];
        let qt = rec_rots.quaternions()[k];
        let d = sym.iter().map(|&s| geodesic_distance(qm, s.product(qt))).fold(f64::INFINITY, f64::min);
        let d2 = sym.iter().map(|&s| geodesic_distance(qm, qt.product(s))).fold(f64::INFINITY, f64::min);
        let dmin = d.min(d2);
        if dmin <= spacing { ok += 1; }
        let bin = ((dmin / spacing) as usize).min(7);
        hist[bin] += 1;
    }
    println!("[{:?}] E-step from exact truth: {}/200 within one spacing; distance histogram (units of spacing): {:?}",
        t0.elapsed(), ok, hist);

    // how much better is the nearest grid rotation's likelihood than others?
    // check frame 0 explicitly
    let q = log_likelihood_table(&frames, &slices, &fl).unwrap();
    let k0 = 0usize;
    let qt = rec_rots.quaternions()[k0];
    let mut best_near = (0usize, f64::NEG_INFINITY);
    let mut best_global = (0usize, f64::NEG_INFINITY);
    for j in 0..grid.len() {
        let dj = sym.iter().map(|&s| geodesic_distance(grid.quaternions()[j], s.product(qt))).fold(f64::INFINITY, f64::min);
        let qv = q[(j, k0)];
        if qv > best_global.1 { best_global = (j, qv); }
        if dj <= spacing && qv > best_near.1 { best_near = (j, qv); }
    }
    println!("frame0: best near-true Q {:.1} vs global best Q {:.1} (at distance {:.3})",
        best_near.1, best_global.1,
        sym.iter().map(|&s| geodesic_distance(grid.quaternions()[best_global.0], s.product(qt))).fold(f64::INFINITY, f64::min));
}
