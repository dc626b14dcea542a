//! Properties of a generated synthetic population and its fold plan.

use std::collections::BTreeSet;

use shapeprior::synth::{
    components, gen_anomalous_shape, generate_population, make_folds, population_subjects, surface_to_volume,
    PopulationSpec,
};
use shapeprior::voxel::{volume_cm3, Group};

fn spec() -> PopulationSpec {
    PopulationSpec {
        n_normal: 8,
        n_anomalous: 4,
        dims: [24, 24, 24],
        scans_per_subject: 2,
        seed: 21,
        ..PopulationSpec::default()
    }
}

#[test]
fn population_is_seeded_and_labelled() {
    let s = spec();
    let a = generate_population(&s).unwrap();
    let b = generate_population(&s).unwrap();
    assert_eq!(a.len(), 24);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.grid, y.grid);
    }
    let other = generate_population(&PopulationSpec { seed: 22, ..s.clone() }).unwrap();
    assert_ne!(a[0].grid, other[0].grid);

    let groups: BTreeSet<Group> = a.iter().map(|m| m.grid.group).collect();
    assert!(groups.contains(&Group::SyntheticAnomalous));
    assert!(groups.len() >= 3, "two normal cohorts plus anomalies, got {groups:?}");
    for m in &a {
        assert_eq!(m.grid.subject_id, m.subject_id);
        assert_eq!(m.grid.group.is_anomalous(), m.subject_id.starts_with('a'));
        assert_eq!(
            components(&m.grid).len(),
            1,
            "{}#{} is not one piece",
            m.subject_id,
            m.scan_index
        );
    }
}

#[test]
fn anomalies_keep_volume_and_roughen_the_surface() {
    let s = spec();
    let pop = generate_population(&s).unwrap();
    let mean = |anomalous: bool| {
        let v: Vec<f64> = pop
            .iter()
            .filter(|m| m.grid.group.is_anomalous() == anomalous)
            .map(|m| volume_cm3(&m.grid))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (vn, va) = (mean(false), mean(true));
    assert!((va - vn).abs() / vn <= 0.15, "volume means {vn} vs {va}");

    for (_, group, seed) in population_subjects(&s).into_iter().filter(|(_, g, _)| g.is_anomalous()) {
        assert_eq!(group, Group::SyntheticAnomalous);
        let shape = gen_anomalous_shape(&s, seed, 0).unwrap();
        assert!(surface_to_volume(&shape.grid) > surface_to_volume(&shape.base));
    }
}

#[test]
fn folds_cover_normals_once_and_test_every_anomaly() {
    let subjects: Vec<(String, Group)> = population_subjects(&spec())
        .into_iter()
        .map(|(id, g, _)| (id, g))
        .collect();
    let plan = make_folds(&subjects, 4, 3).unwrap();
    let anomalous: BTreeSet<&String> = subjects
        .iter()
        .filter(|(_, g)| g.is_anomalous())
        .map(|(id, _)| id)
        .collect();
    let mut tested_normals = Vec::new();
    for fold in &plan.folds {
        let train: BTreeSet<&String> = fold.train.iter().collect();
        assert!(train.is_disjoint(&anomalous));
        assert!(fold.test.iter().all(|id| !train.contains(id)));
        assert!(anomalous.iter().all(|id| fold.test.contains(id)));
        tested_normals.extend(fold.test.iter().filter(|id| !anomalous.contains(id)).cloned());
        assert_eq!(fold.train.len() + fold.test.len(), subjects.len());
    }
    tested_normals.sort();
    let mut normals: Vec<String> = subjects
        .iter()
        .filter(|(_, g)| !g.is_anomalous())
        .map(|(id, _)| id.clone())
        .collect();
    normals.sort();
    assert_eq!(tested_normals, normals);
    assert_eq!(make_folds(&subjects, 4, 3).unwrap(), plan);
}
