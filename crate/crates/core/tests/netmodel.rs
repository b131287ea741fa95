use approx::assert_relative_eq;
use foid::netmodel::{
    build_ybus, line_impedance, load_network, reduced_ybus, sensitivities, sensitivity_matrices, BusKind,
    NetworkError, NetworkModel, C64,
};
use foid::harness::builtin_case;
use nalgebra::DMatrix;

const HEADER: &str = r#"
version = 1
shunts = false
[bases]
s_base = 75.0
v_base = 239.6003617136947
frequency = 50.0
[limits]
v_nom = 1.0
v_min = 0.95
v_max = 1.05
[transformer]
s_max = 75.0
"#;

fn line(from: usize, to: usize) -> String {
    format!(
        "[[lines]]\nfrom = {from}\nto = {to}\nlength = 0.075\nr_per_km = 0.549\nl_per_km = 0.230\nc_per_km = 0.055\n"
    )
}

fn bus(id: usize, kind: &str) -> String {
    format!("[[buses]]\nid = {id}\nkind = \"{kind}\"\n")
}

fn net(text: &str) -> Result<NetworkModel, NetworkError> {
    NetworkModel::from_toml_str(&format!("{HEADER}{text}"), "test")
}

fn chain(n: usize) -> NetworkModel {
    let mut t = bus(0, "slack");
    for i in 1..n {
        t += &bus(i, "pole");
    }
    for i in 1..n {
        t += &line(i - 1, i);
    }
    net(&t).unwrap()
}

fn data(name: &str) -> String {
    format!("{}/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn builtin_case_layout() {
    let case = builtin_case();
    let n = &case.net;
    let count = |k| n.buses.iter().filter(|b| b.kind == k).count();
    assert_eq!(count(BusKind::Slack), 1);
    assert_eq!(count(BusKind::Pole), 6);
    assert_eq!(count(BusKind::Household), 12);
    assert_eq!(n.lines.len(), 18);
    assert_eq!(n.transformer_s_max, 75.0);
    assert_relative_eq!(n.total_load_kw(), 17.02, max_relative = 1e-12);
    assert_eq!(case.reference_load_kw, 17.04);
    assert_eq!(n.buses[n.households()[11]].load_p, 5.08);
}

#[test]
fn shipped_network_files_load() {
    let a = load_network(data("feeder18.toml")).unwrap();
    assert_eq!(a, builtin_case().net);
    let b = load_network(data("feeder18_tx_at_pole1.toml")).unwrap();
    assert_eq!((b.buses.len(), b.lines.len(), b.households().len()), (18, 17, 12));
    let c = load_network(data("feeder_12pole.toml")).unwrap();
    assert_eq!((c.buses.len(), c.lines.len(), c.households().len()), (25, 24, 12));
}

#[test]
fn two_slack_buses_rejected() {
    let err = net(&(bus(0, "slack") + &bus(1, "slack") + &line(0, 1))).unwrap_err();
    assert!(matches!(err, NetworkError::Invalid(ref m) if m.contains("slack")), "{err}");
}

#[test]
fn disconnected_bus_is_named() {
    let err = net(&(bus(0, "slack") + &bus(1, "pole") + &bus(2, "pole") + &line(0, 1))).unwrap_err();
    assert!(err.to_string().contains("bus 2"), "{err}");
}

#[test]
fn parse_error_names_origin() {
    let err = NetworkModel::from_toml_str("buses = 3", "broken.toml").unwrap_err();
    assert!(matches!(err, NetworkError::Parse { ref path, .. } if path == "broken.toml"));
    assert!(load_network("/nonexistent/net.toml").is_err());
}

#[test]
fn invalid_limits_rejected() {
    let text = format!("{HEADER}{}{}{}", bus(0, "slack"), bus(1, "pole"), line(0, 1)).replace("v_max = 1.05", "v_max = 0.99");
    assert!(NetworkModel::from_toml_str(&text, "t").is_err());
}

#[test]
fn pole_and_drop_impedances() {
    let case = builtin_case();
    let pole = case.net.lines.iter().find(|l| l.length == 0.075).unwrap();
    let drop = case.net.lines.iter().find(|l| l.length == 0.025).unwrap();
    let zp = line_impedance(pole, 50.0);
    let zd = line_impedance(drop, 50.0);
    assert_relative_eq!(zp.re, 0.041175, max_relative = 1e-12);
    assert_relative_eq!(zp.im, 0.005419247327, max_relative = 1e-9);
    assert_relative_eq!(zd.re, 0.00675, max_relative = 1e-12);
    assert_relative_eq!(zd.im, 0.001884955592, max_relative = 1e-9);
}

#[test]
fn per_unit_round_trip() {
    let case = builtin_case();
    let n = &case.net;
    assert_relative_eq!(n.z_base(), 415.0 * 415.0 / 75e3, max_relative = 1e-12);
    for l in &n.lines {
        let back = n.line_z_pu(l) * n.z_base();
        let ohm = line_impedance(l, n.frequency);
        assert_relative_eq!(back.re, l.r_per_km * l.length, max_relative = 1e-12);
        assert_relative_eq!(back.im, ohm.im, max_relative = 1e-12);
    }
    assert_relative_eq!(n.pu_to_kw(n.kw_to_pu(3.17)), 3.17, max_relative = 1e-15);
}

#[test]
fn two_bus_ybus_and_sensitivity() {
    let n = chain(2);
    let y = build_ybus(&n).unwrap();
    let ys = n.line_y_pu(&n.lines[0]);
    assert_eq!(y[(0, 0)], ys);
    assert_eq!(y[(0, 1)], -ys);
    assert_eq!(y[(1, 0)], -ys);
    assert_eq!(y[(1, 1)], ys);
    let s = sensitivity_matrices(&y, 0).unwrap();
    let z = n.line_z_pu(&n.lines[0]);
    assert_relative_eq!(s.r[(0, 0)], z.re, max_relative = 1e-12);
    assert_relative_eq!(s.x[(0, 0)], z.im, max_relative = 1e-12);
}

#[test]
fn three_bus_chain_middle_diagonal() {
    let n = chain(3);
    let y = build_ybus(&n).unwrap();
    let ys = n.line_y_pu(&n.lines[0]);
    assert_relative_eq!((y[(1, 1)] - ys * 2.0).norm(), 0.0, epsilon = 1e-9);
}

#[test]
fn ybus_symmetric_with_zero_row_sums() {
    let case = builtin_case();
    let y = build_ybus(&case.net).unwrap();
    assert!((&y - y.transpose()).iter().all(|v| v.norm() < 1e-12));
    for i in 0..y.nrows() {
        let s: C64 = y.row(i).iter().sum();
        assert!(s.norm() < 1e-9 * y[(i, i)].norm(), "row {i} sums to {s}");
    }
    for l in &case.net.lines {
        assert_eq!(y[(l.from, l.to)], -case.net.line_y_pu(l));
    }
}

#[test]
fn shunt_halves_appear_in_row_sums() {
    let mut n = chain(3);
    n.shunts = true;
    let y = build_ybus(&n).unwrap();
    let sh = n.line_half_shunt_pu(&n.lines[0]);
    let row = |i: usize| -> C64 { y.row(i).iter().sum() };
    assert_relative_eq!((row(0) - sh).norm(), 0.0, epsilon = 1e-9);
    assert_relative_eq!((row(1) - sh * 2.0).norm(), 0.0, epsilon = 1e-9);
    assert!(sh.norm() < 1e-3);
}

#[test]
fn sensitivities_invert_reduced_admittance() {
    let case = builtin_case();
    let y = build_ybus(&case.net).unwrap();
    let s = &case.sens;
    assert_eq!((s.r.nrows(), s.r.ncols()), (18, 18));
    let (red, keep) = reduced_ybus(&y, case.net.slack());
    assert_eq!(keep, s.buses);
    let prod = red * s.z();
    let eye = DMatrix::<C64>::identity(18, 18);
    assert!((prod - eye).iter().all(|v| v.norm() < 1e-9));
    let scale = s.r.amax();
    assert!((&s.r - s.r.transpose()).amax() < 1e-10 * scale);
    assert!((&s.x - s.x.transpose()).amax() < 1e-10 * s.x.amax());
    assert!(s.r.clone().cholesky().is_some());
}

/// Shared-path resistance from the slack, walking parent pointers.
fn path_oracle(n: &NetworkModel) -> DMatrix<f64> {
    let nb = n.buses.len();
    let mut parent = vec![usize::MAX; nb];
    let mut r_up = vec![0.0; nb];
    let mut stack = vec![n.slack()];
    parent[n.slack()] = n.slack();
    while let Some(u) = stack.pop() {
        for l in &n.lines {
            let v = if l.from == u {
                l.to
            } else if l.to == u {
                l.from
            } else {
                continue;
            };
            if parent[v] == usize::MAX {
                parent[v] = u;
                r_up[v] = l.r_per_km * l.length / n.z_base();
                stack.push(v);
            }
        }
    }
    let path = |mut b: usize| {
        let mut p = vec![];
        while b != n.slack() {
            p.push(b);
            b = parent[b];
        }
        p
    };
    let ns = n.non_slack();
    DMatrix::from_fn(ns.len(), ns.len(), |i, j| {
        let (a, b) = (path(ns[i]), path(ns[j]));
        a.iter().filter(|x| b.contains(x)).map(|&x| r_up[x]).sum()
    })
}

#[test]
fn resistance_sensitivity_matches_path_oracle() {
    for file in ["feeder18.toml", "feeder18_tx_at_pole1.toml", "feeder_12pole.toml"] {
        let n = load_network(data(file)).unwrap();
        let s = sensitivities(&n).unwrap();
        let oracle = path_oracle(&n);
        let err = (&s.r - &oracle).amax();
        assert!(err < 1e-9 * oracle.amax(), "{file}: {err:e}");
    }
}

#[test]
fn frozen_sensitivity_entries() {
    // numpy inverse of the reduced admittance matrix
    let s = &builtin_case().sens;
    assert_relative_eq!(s.r[(17, 17)], 0.11052402380606992, max_relative = 1e-10);
    assert_relative_eq!(s.x[(17, 17)], 0.014980594958691454, max_relative = 1e-10);
    assert_relative_eq!(s.r[(17, 6)], 0.017930759181304032, max_relative = 1e-10);
}
