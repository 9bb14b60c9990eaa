use super::*;
use crate::simulate::{fit_sur_fgls, generate_dataset, DgpConfig};
use crate::stats::RngStream;

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let cfg = DgpConfig::case_i_1(40);
    let mut rng = RngStream::new(500);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let dir = tempdir();
    let manifest_path = save_dataset(&data, dir.path()).unwrap();
    let loaded = load_dataset(&manifest_path).unwrap();
    assert_eq!(loaded.n(), 40);
    assert_eq!(loaded.m(), 2);
    for i in 0..40 {
        for j in 0..2 {
            assert_eq!(loaded.y[(i, j)].to_bits(), data.y[(i, j)].to_bits());
            assert_eq!(loaded.w[(i, j)].to_bits(), data.w[(i, j)].to_bits());
        }
        for eq in 0..2 {
            for j in 0..3 {
                assert_eq!(
                    loaded.x[eq][(i, j)].to_bits(),
                    data.x[eq][(i, j)].to_bits()
                );
            }
        }
    }
    // Ground truth round-trips through its own files.
    let truth = load_truth_params(dir.path()).unwrap();
    assert_eq!(truth.beta, cfg.beta_true);
}

#[test]
fn manifest_reports_missing_column_by_name() {
    let dir = tempdir();
    std::fs::write(dir.path().join("d.csv"), "a,b\n1,2\n").unwrap();
    let manifest = DatasetManifest {
        data: "d.csv".into(),
        exposure: true,
        equations: vec![EquationSpec {
            response: "a".into(),
            covariates: vec!["__const__".into()],
            reading: "zz".into(),
        }],
    };
    let err = load_dataset_with(&manifest, dir.path()).unwrap_err();
    assert!(err.to_string().contains("`zz`"), "{err}");
}

#[test]
fn loader_synthesizes_constant_and_reports_bad_cells() {
    let dir = tempdir();
    std::fs::write(
        dir.path().join("d.csv"),
        "y1,w1,x1\n1.0,0.5,2.0\n2.0,0.25,4.0\n",
    )
    .unwrap();
    let manifest = DatasetManifest {
        data: "d.csv".into(),
        exposure: true,
        equations: vec![EquationSpec {
            response: "y1".into(),
            covariates: vec!["__const__".into(), "x1".into()],
            reading: "w1".into(),
        }],
    };
    let data = load_dataset_with(&manifest, dir.path()).unwrap();
    assert_eq!(data.x[0][(0, 0)], 1.0);
    assert_eq!(data.x[0][(1, 0)], 1.0);
    assert_eq!(data.x[0][(1, 1)], 4.0);

    std::fs::write(dir.path().join("bad.csv"), "y1,w1,x1\n1.0,oops,2.0\n").unwrap();
    let manifest_bad = DatasetManifest {
        data: "bad.csv".into(),
        ..manifest
    };
    let err = load_dataset_with(&manifest_bad, dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("oops") && msg.contains("w1"), "{msg}");
}

#[test]
fn report_round_trips_through_toml() {
    let cfg = DgpConfig::case_i_1(60);
    let mut rng = RngStream::new(501);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let report = fit_sur_fgls(&data).unwrap();
    let dir = tempdir();
    let path = dir.path().join("report.toml");
    save_report(&report, &path).unwrap();
    let loaded = load_report(&path).unwrap();
    let path2 = dir.path().join("report2.toml");
    save_report(&loaded, &path2).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        std::fs::read_to_string(&path2).unwrap()
    );
    assert_eq!(loaded.schema, "surme-report/1");
}

#[test]
fn reports_are_identical_apart_from_runtime() {
    let cfg = DgpConfig::case_i_1(60);
    let mut rng = RngStream::new(502);
    let data = generate_dataset(&cfg, &mut rng).unwrap();
    let a = fit_sur_fgls(&data).unwrap();
    let b = fit_sur_fgls(&data).unwrap();
    let strip = |r: &crate::model::FitReport| {
        let text = toml::to_string_pretty(r).unwrap();
        text.lines()
            .filter(|l| !l.starts_with("runtime_seconds"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn chain_table_round_trips() {
    let table = ChainTable {
        columns: vec!["a".into(), "b".into()],
        draws: vec![
            vec![1.0, -2.5e-17],
            vec![0.1 + 0.2, f64::MIN_POSITIVE],
            vec![-0.0, 12345.678901234567],
        ],
    };
    let dir = tempdir();
    let path = dir.path().join("chain.csv");
    write_chain(&table, &path).unwrap();
    let loaded = read_chain(&path).unwrap();
    assert_eq!(loaded.columns, table.columns);
    for (ra, rb) in loaded.draws.iter().zip(&table.draws) {
        for (a, b) in ra.iter().zip(rb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn priors_file_scalar_shorthands_and_defaults() {
    let text = r#"
        beta0 = 0.0
        b0 = 10.0
        nu0 = 10.0
        s0 = [[10.0, 0.0], [0.0, 10.0]]
        delta1 = 50.0
        delta2 = 10.0
    "#;
    let file: PriorsFile = toml::from_str(text).unwrap();
    let spec = file.into_prior_spec(2, 6).unwrap();
    assert_eq!(spec.beta0[0], 0.0);
    assert_eq!(spec.b0.as_matrix()[(3, 3)], 10.0);
    assert_eq!(spec.b0.as_matrix()[(0, 1)], 0.0);
    assert_eq!(spec.nu0, 10.0);
    assert_eq!(spec.s0.as_matrix()[(1, 1)], 10.0);
    assert_eq!(spec.delta1, 50.0);
    // Untouched fields keep the reference defaults.
    assert_eq!(spec.delta3, 0.01);
    assert_eq!(spec.gamma0[1], 1.0);

    // Omitted file: the reference priors.
    let spec = load_priors(None, 2, 6, true).unwrap();
    assert_eq!(spec.nu0, 50.0);
    assert_eq!(spec.s0.as_matrix()[(0, 0)], 50.0);
    assert_eq!(spec.s0.as_matrix()[(0, 1)], 25.0);
    assert_eq!(spec.delta1, 0.01);
    assert_eq!(spec.beta0[0], 1.0);
}

#[test]
fn priors_file_rejects_bad_dimensions_and_unknown_keys() {
    let file: PriorsFile = toml::from_str("beta0 = [1.0, 2.0]").unwrap();
    assert!(file.into_prior_spec(2, 6).is_err());
    assert!(toml::from_str::<PriorsFile>("nonsense = 1").is_err());
}

#[test]
fn density_and_z_summary_files_have_expected_shape() {
    let dir = tempdir();
    let path = dir.path().join("density.csv");
    write_density(&[0.0, 0.5, 1.0], &[0.2, 0.6, 0.2], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("grid,density\n"));
    assert_eq!(text.lines().count(), 4);

    let mean = nalgebra::DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let var = nalgebra::DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
    let zpath = dir.path().join("z.csv");
    write_z_summary(&mean, &var, &zpath).unwrap();
    let text = std::fs::read_to_string(&zpath).unwrap();
    assert!(text.starts_with("i,m,mean,var\n"));
    assert_eq!(text.lines().count(), 5);
}
