//! Train a teacher, distill a half-depth student in both modes, and
//! compare them on held-out sequences.

use avtrack::config::{Config, Profile};
use avtrack::data::{gen_collection, GenConfig, SequenceDataset};
use avtrack::distill::{build_student, MdMode, TeacherEnsemble};
use avtrack::eval::{boxes_of, success_auc, track_sequence};
use avtrack::model::TrackerModel;
use avtrack::tensor::ParamStore;
use avtrack::train::{Distiller, Trainer};
use avtrack::vit::ForceGates;

fn mean_auc(model: &TrackerModel, store: &ParamStore<f32>, seqs: &[SequenceDataset]) -> avtrack::Result<f64> {
    let mut sum = 0.0;
    for ds in seqs {
        let recs = track_sequence(model, store, ds, &ForceGates::None)?;
        sum += success_auc(&boxes_of(&recs), &ds.boxes)?;
    }
    Ok(sum / seqs.len() as f64)
}

fn main() -> avtrack::Result<()> {
    let cfg = Config::for_profile(Profile::Desk);
    let train = gen_collection(&cfg.gen, cfg.sequences)?;
    let held = gen_collection(&GenConfig { seed: 1000, ..cfg.gen.clone() }, 4)?;
    let mut teacher = Trainer::<f32>::new(&cfg, &train)?;
    teacher.run(|_, _, _| {})?;
    println!("teacher held-out AUC {:.4}", mean_auc(&teacher.model, &teacher.store, &held)?);
    for mode in [MdMode::Jsd, MdMode::Mse] {
        let mut scfg = cfg.clone();
        scfg.md_mode = mode;
        scfg.model.backbone = build_student(&cfg.model.backbone, None)?;
        let ens = TeacherEnsemble::new(vec![(teacher.model.clone(), teacher.store.clone())])?;
        let mut d = Distiller::new(&scfg, ens, &train)?;
        d.run(|_, _, _| {})?;
        println!("student ({}) held-out AUC {:.4}", mode.name(), mean_auc(&d.student, &d.store, &held)?);
    }
    Ok(())
}
