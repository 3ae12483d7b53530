mod common;

use std::f64::consts::TAU;

use ctnode::geometry::{ConeGeometry, FanGeometry, Geometry};
use ctnode::net::NetArch;
use ctnode::ode::OdeConfig;
use ctnode::phantoms::*;
use ctnode::projector::op_norm_estimate;
use ctnode::training::*;
use ctnode::volume::VolumeGrid;

fn tiny_set() -> (Vec<Sample>, Vec<Sample>, OdeConfig) {
    let grid = VolumeGrid::square(16, 1.0).unwrap();
    let geom: Geometry = FanGeometry::new(12, 25, 40.0, 40.0, TAU).unwrap().into();
    let mk = |seed: u64| {
        let x = make_phantom(&PhantomSpec::new(PhantomKind::DiskSet, &[16, 16], seed)).unwrap();
        let p = simulate_measurement(&x, &geom, &NoiseModel::Gaussian { sigma: 0.01 }, 500 + seed).unwrap();
        Sample { sinogram: p, target: x }
    };
    let n = op_norm_estimate(&geom, &grid, 30).unwrap();
    let ode = OdeConfig {
        lambda: 4.0 / (n * n),
        mu: n * n / 4.0,
        ..OdeConfig::default()
    };
    ((0..3).map(mk).collect(), (10..12).map(mk).collect(), ode)
}

fn small_arch() -> NetArch {
    NetArch {
        n_levels: 1,
        base_channels: 2,
        ..NetArch::default()
    }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr_net: 3e-3,
        lr_gamma: 0.05,
        gamma_init: 0.2,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn short_run_improves_validation_loss() {
    let (tr, val, ode) = tiny_set();
    let out = train(&tr, &val, &small_arch(), &ode, &cfg(4)).unwrap();
    let h = &out.history;
    assert_eq!(h.epochs.len(), 4);
    assert!(h.epochs.iter().all(|e| e.updates == 3 && e.diverged == 0));
    assert_eq!(h.epochs.last().unwrap().adam_step, 12);
    let best = h.best().unwrap();
    assert!(best.mean_val_loss < h.initial_val_loss, "{} vs {}", best.mean_val_loss, h.initial_val_loss);
    assert_eq!(out.best.meta.epoch, best.epoch);
    assert_eq!(out.best.meta.val_loss, best.mean_val_loss);
    assert_eq!(out.best.meta.gamma, best.gamma);
}

#[test]
fn training_is_deterministic() {
    let (tr, val, ode) = tiny_set();
    let a = train(&tr, &val, &small_arch(), &ode, &cfg(2)).unwrap();
    let b = train(&tr, &val, &small_arch(), &ode, &cfg(2)).unwrap();
    assert_eq!(a.best.params.values, b.best.params.values);
    assert_eq!(a.history, b.history);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (tr, val, ode) = tiny_set();
    let dir = tempfile::tempdir().unwrap();
    let full = train(&tr, &val, &small_arch(), &ode, &cfg(3)).unwrap();
    let first = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg(2)
    };
    train(&tr, &val, &small_arch(), &ode, &first).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let state = ResumeState::load(dir.path()).unwrap();
    assert_eq!(state.adam.t, 6);
    let rest = TrainConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..cfg(3)
    };
    let resumed = train_resume(&tr, &val, &small_arch(), &ode, &rest, Some(state)).unwrap();
    let steps: Vec<u64> = resumed.history.epochs.iter().map(|e| e.adam_step).collect();
    assert_eq!(steps, vec![3, 6, 9]);
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.best.params.values, full.best.params.values);
    let last = Checkpoint::load(dir.path(), "last").unwrap();
    assert_eq!(last.meta.epoch, 3);
    assert_eq!(last.meta.train.checkpoint_dir, None);
}

#[test]
fn loss_gradient_is_sign_over_mask() {
    let grid = VolumeGrid::square(16, 1.0).unwrap();
    let geom: Geometry = FanGeometry::new(12, 25, 40.0, 40.0, TAU).unwrap().into();
    let mask = fov_mask(&grid, &geom);
    let w: f64 = mask.data.iter().sum();
    let t = make_phantom(&PhantomSpec::new(PhantomKind::DiskSet, &[16, 16], 1)).unwrap();
    let mut p = t.clone();
    p.data.iter_mut().enumerate().for_each(|(i, v)| *v += if i % 2 == 0 { 1e-3 } else { -2e-3 });
    let g = l1_fov_grad(&p, &t, &mask).unwrap();
    for i in 0..grid.len() {
        let want = mask.data[i] * if i % 2 == 0 { 1.0 } else { -1.0 } / w;
        assert_eq!(g[i], want);
    }
    assert!((l1_fov_loss(&p, &t, &mask).unwrap() - 1.5e-3).abs() < 1e-4);
}

#[test]
fn cone_mask_is_a_cylinder() {
    let grid = VolumeGrid::cube(16, 1.0).unwrap();
    let geom: Geometry = ConeGeometry::new(8, 6, 40, 40.0, 40.0, 1.0, TAU).unwrap().into();
    let m = fov_mask(&grid, &geom);
    let slice_count = |iz: usize| {
        let mut c = 0.0;
        for iy in 0..16 {
            for ix in 0..16 {
                c += m.get(ix, iy, iz);
            }
        }
        c
    };
    // rows cover only a slab around the midplane
    assert_eq!(slice_count(0), 0.0);
    assert_eq!(slice_count(15), 0.0);
    assert!(slice_count(8) > 0.0);
    assert_eq!(slice_count(7), slice_count(8));
    // every covered slice has the same lateral disk
    let full: Vec<usize> = (0..16).filter(|&z| slice_count(z) > 0.0).collect();
    assert!(full.iter().all(|&z| slice_count(z) == slice_count(8)));
}
