use avtrack::checkpoint::{load_checkpoint, save_checkpoint};
use avtrack::config::{Config, Profile};
use avtrack::data::gen_collection;
use avtrack::distill::{build_student, MdMode, TeacherEnsemble};
use avtrack::eval::{boxes_of, track_sequence, EvalReport};
use avtrack::model::TrackerModel;
use avtrack::train::{Distiller, Trainer};
use avtrack::vit::ForceGates;

fn small() -> Config {
    let mut cfg = Config::for_profile(Profile::Desk);
    cfg.batch_size = 2;
    cfg.steps = 3;
    cfg.gen.length = 6;
    cfg
}

#[test]
fn training_is_deterministic_and_survives_a_checkpoint() {
    let cfg = small();
    let seqs = gen_collection(&cfg.gen, 2).unwrap();
    let run = || {
        let mut t = Trainer::<f64>::new(&cfg, &seqs).unwrap();
        let mut totals = Vec::new();
        t.run(|_, _, r| totals.push(r.total)).unwrap();
        (t, totals)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert!(la.iter().all(|v| v.is_finite()));
    assert!(a.store.same_values(&b.store));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    save_checkpoint(&path, &cfg, &a.store).unwrap();
    let (cfg2, store2) = load_checkpoint::<f64>(&path).unwrap();
    let model2 = TrackerModel::bind(&cfg2.model, &store2).unwrap();
    let r1 = track_sequence(&a.model, &a.store, &seqs[0], &ForceGates::None).unwrap();
    let r2 = track_sequence(&model2, &store2, &seqs[0], &ForceGates::None).unwrap();
    assert_eq!(boxes_of(&r1), boxes_of(&r2));
    assert_eq!(r1[0].bbox, seqs[0].boxes[0]);
    assert_eq!(r1.len(), seqs[0].len());
    let rep = EvalReport::compute(&boxes_of(&r1), &seqs[0].boxes).unwrap();
    assert!((0.0..=1.0).contains(&rep.success_auc));
}

#[test]
fn distillation_updates_only_the_student() {
    let mut cfg = small();
    let seqs = gen_collection(&cfg.gen, 2).unwrap();
    let teachers: Vec<_> = (0..2).map(|s| TrackerModel::init::<f64>(&cfg.model, s).unwrap()).collect();
    let frozen: Vec<_> = teachers.iter().map(|t| t.1.clone()).collect();
    cfg.model.backbone = build_student(&cfg.model.backbone, None).unwrap();
    for mode in [MdMode::Jsd, MdMode::Mse] {
        cfg.md_mode = mode;
        let ens = TeacherEnsemble::new(teachers.clone()).unwrap();
        let mut d = Distiller::<f64>::new(&cfg, ens, &seqs).unwrap();
        let (s0, c0) = (d.store.clone(), d.critic_store.clone());
        let mut md = Vec::new();
        d.run(|_, _, r| md.push(r.md)).unwrap();
        assert!(md.iter().all(|v| v.is_finite() && *v >= 0.0), "{mode:?}: {md:?}");
        assert!(!d.store.same_values(&s0));
        assert_eq!(d.critic_store.same_values(&c0), mode == MdMode::Mse);
        for ((_, s), f) in d.ensemble.teachers.iter().zip(&frozen) {
            assert!(s.same_values(f));
        }
        assert_eq!(d.student.backbone.blocks.len(), 4);
    }
}
