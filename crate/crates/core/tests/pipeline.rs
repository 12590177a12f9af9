use fact_core::field::{decode_checkpoint, encode_checkpoint, FieldConfig, FieldParams, MaskSchedule};
use fact_core::geometry::ConeBeamGeometry;
use fact_core::metrics::psnr3d;
use fact_core::optim::{meta_train_bundles, MetaConfig};
use fact_core::projector::{
    forward_project, load_bundle, load_volume, make_phantom, save_bundle, save_volume, PhantomKind, PhantomSpec,
    ProjectionBundle, VoxelVolume,
};
use fact_core::recon::{reconstruct_field, reconstruct_from, FieldInit, TrainConfig, Trainer};

fn phantom(geom: &ConeBeamGeometry, seed: u64) -> VoxelVolume {
    let spec = PhantomSpec { kind: PhantomKind::RandomEllipsoids, seed, ..PhantomSpec::default() };
    make_phantom(&spec, geom.vol_shape, geom.vol_spacing).unwrap()
}

fn small_field() -> FieldConfig {
    let mut f = FieldConfig::desk();
    f.grid.levels = 4;
    f.grid.table_size = 1 << 10;
    f.hidden = vec![16, 16];
    f
}

#[test]
fn artifacts_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let geom = ConeBeamGeometry::desk(16, 5).unwrap();
    let vol = phantom(&geom, 4);
    save_volume(&vol, Some(4), &dir.path().join("vol")).unwrap();
    let (back, seed) = load_volume(&dir.path().join("vol")).unwrap();
    assert_eq!((back, seed), (vol.clone(), Some(4)));

    let bundle = forward_project(&vol, &geom, 1.0, 12).unwrap();
    save_bundle(&bundle, &dir.path().join("b")).unwrap();
    assert_eq!(load_bundle(&dir.path().join("b")).unwrap(), bundle);
}

#[test]
fn training_improves_on_the_initial_field() {
    let geom = ConeBeamGeometry::desk(16, 12).unwrap();
    let truth = phantom(&geom, 1);
    let bundle = forward_project(&truth, &geom, 1.0, 12).unwrap();
    let cfg = TrainConfig { max_epochs: 150, lr: 3e-3, batch_rays: 128, eval_every: 50, ..TrainConfig::default() };
    let (vol, log) = reconstruct_field(&bundle, &small_field(), &cfg, Some(&truth)).unwrap();
    let series = log.psnr_series();
    assert_eq!(series.first().unwrap().0, 0);
    assert_eq!(series.last().unwrap().0, 150);
    assert!(series.last().unwrap().1 > series[0].1 + 3.0, "{series:?}");
    assert_eq!(psnr3d(&vol, &truth, None).unwrap().db(), series.last().unwrap().1);
}

#[test]
fn loss_falls_over_a_window_for_most_seeds() {
    let geom = ConeBeamGeometry::desk(12, 8).unwrap();
    let mut drops = Vec::new();
    for seed in 0..3 {
        let bundle = forward_project(&phantom(&geom, 10 + seed), &geom, 1.0, 10).unwrap();
        let cfg = TrainConfig { seed, lr: 3e-3, batch_rays: 64, ..TrainConfig::default() };
        let mut t = Trainer::new(&bundle, FieldParams::<f32>::random(&small_field(), seed).unwrap(), &cfg).unwrap();
        let losses: Vec<f64> = (0..200).map(|e| t.step(e).unwrap()).collect();
        let head: f64 = losses[..20].iter().sum();
        let tail: f64 = losses[180..].iter().sum();
        drops.push(head - tail);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

fn corpus(geom: &ConeBeamGeometry) -> Vec<ProjectionBundle> {
    (20..23).map(|s| forward_project(&phantom(geom, s), geom, 1.0, 10).unwrap()).collect()
}

#[test]
fn meta_training_is_reproducible_and_usable() {
    let geom = ConeBeamGeometry::desk(12, 6).unwrap();
    let bundles = corpus(&geom);
    let field = small_field();
    let sched = MaskSchedule::paper(field.grid.levels, 2).unwrap();
    let mc = MetaConfig { inner_epochs: 6, n_iterations: 4, outer_lr: 0.5, batch_rays: 64, ..MetaConfig::default() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (a, log_a) = pool.install(|| meta_train_bundles(&bundles, &mc, &field, Some(&sched), 3)).unwrap();
    let (b, log_b) = pool.install(|| meta_train_bundles(&bundles, &mc, &field, Some(&sched), 3)).unwrap();
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
    assert_eq!(log_a.to_csv(false), log_b.to_csv(false));
    assert_eq!(log_a.records.len(), 4);
    assert_ne!(a.data, FieldParams::<f32>::random(&field, 3).unwrap().data);

    let bytes = encode_checkpoint(&a);
    let back: FieldParams<f32> = decode_checkpoint(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back.data, a.data);

    let truth = phantom(&geom, 30);
    let bundle = forward_project(&truth, &geom, 1.0, 10).unwrap();
    let cfg = TrainConfig { max_epochs: 0, schedule: Some(sched), init: FieldInit::Random { seed: 0 }, ..TrainConfig::default() };
    let (vol, log) = reconstruct_from(&bundle, a, &cfg, Some(&truth)).unwrap();
    assert_eq!(log.records.len(), 1);
    assert!(vol.data.iter().all(|v| v.is_finite() && *v >= 0.0));
}
