import csv
import json

import numpy as np
import pytest

from threshold_cox.cli import RunConfig, ConfigError, main, read_subjects


def write_subjects(path, n=300, seed=0, sigma_u=0.5, with_z=True, base=0.05):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    z = rng.normal(size=n)
    t = rng.exponential(1 / (base * np.exp(0.4 * x + 0.7 * np.maximum(x, 0) + 0.3 * z * with_z)))
    w = x + sigma_u * rng.normal(size=n)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["id", "entry_time", "exit_time", "event", "stratum", "w"] + (["z1"] if with_z else []))
        for i in range(n):
            row = [f"s{i}", 0.0, float(min(t[i], 10.0)), int(t[i] <= 10), 1, float(w[i])]
            out.writerow(row + ([float(z[i])] if with_z else []))
    return path


def write_reliability(path, m=100, seed=1, sigma_u=0.5):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=m)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["subject_id", "replicate", "w"])
        for i in range(m):
            for r in (1, 2):
                out.writerow([i, r, float(x[i] + sigma_u * rng.normal())])
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_fit_writes_report_with_consistent_pvalues(tmp_path):
    subj = write_subjects(tmp_path / "s.csv")
    rel = write_reliability(tmp_path / "r.csv")
    out = tmp_path / "fit.csv"
    code = main(["fit", "--subjects", str(subj), "--reliability", str(rel), "--tau", "0",
                 "--methods", "Naive,RC1,RC2,RR1", "-o", str(out), "--c-index"])
    assert code == 0
    rows = read_rows(out)
    assert [r["method"] for r in rows[::3]] == ["Naive", "RC1", "RC2", "RR1"]
    assert [r["parameter"] for r in rows[:3]] == ["gamma1", "beta", "omega"]
    for r in rows:
        lo, hi, p = float(r["ci_lower"]), float(r["ci_upper"]), float(r["p_value"])
        assert (p < 0.05) == (lo > 0 or hi < 0)
        assert 0.5 < float(r["c_index"]) < 1


def test_fit_without_error_gives_identical_estimates(tmp_path):
    subj = write_subjects(tmp_path / "s.csv", n=200)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"methods": ["Naive", "RC1", "RC2", "RR1", "MPPLE", "SIMEX"],
                               "simex_b": 2, "simex_cov_bootstrap": 0}))
    out = tmp_path / "fit.csv"
    code = main(["fit", "--config", str(cfg), "--subjects", str(subj), "--tau", "0",
                 "--sigma-u2", "0", "-o", str(out)])
    assert code == 0
    rows = read_rows(out)
    naive = [float(r["estimate"]) for r in rows if r["method"] == "Naive"]
    for m in ("RC1", "RC2", "RR1", "MPPLE", "SIMEX"):
        est = [float(r["estimate"]) for r in rows if r["method"] == m]
        np.testing.assert_allclose(est, naive, atol=1e-8, err_msg=m)


def test_missing_reliability_file_is_config_error(tmp_path, capsys):
    subj = write_subjects(tmp_path / "s.csv")
    code = main(["fit", "--subjects", str(subj), "--reliability", str(tmp_path / "nope.csv"),
                 "--tau", "0", "--methods", "RC1", "-o", str(tmp_path / "o.csv")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_correction_without_nuisance_source_is_config_error(tmp_path):
    subj = write_subjects(tmp_path / "s.csv")
    assert main(["fit", "--subjects", str(subj), "--tau", "0", "--methods", "RC1",
                 "-o", str(tmp_path / "o.csv")]) == 2


def test_schema_errors_report_line_numbers(tmp_path, capsys):
    bad = tmp_path / "s.csv"
    bad.write_text("id,entry_time,exit_time,event,stratum,w\na,0,1,1,1,0.5\nb,0,1,2,1,0.1\n")
    assert main(["fit", "--subjects", str(bad), "--tau", "0", "-o", str(tmp_path / "o.csv")]) == 2
    assert f"{bad}:3" in capsys.readouterr().err
    with pytest.raises(ConfigError, match="missing columns"):
        (tmp_path / "t.csv").write_text("id,exit_time,event\n")
        read_subjects(tmp_path / "t.csv")


def test_unknown_config_field_is_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"methodz": ["Naive"]}))
    with pytest.raises(ConfigError, match="unknown configuration fields"):
        RunConfig.from_json(cfg)


def test_mpple_with_time_varying_covariates_is_hard_error(tmp_path, capsys):
    subj = tmp_path / "s.csv"
    subj.write_text("id,entry_time,exit_time,event,stratum\na,0,3,1,1\nb,0,2,0,1\nc,0,4,1,1\n")
    paths = tmp_path / "p.csv"
    paths.write_text("id,time,w\na,0,0.1\na,1,0.4\nb,0,0.3\nc,0,-0.2\nc,2,0.0\n")
    code = main(["fit", "--subjects", str(subj), "--paths", str(paths), "--tau", "0",
                 "--methods", "MPPLE", "--sigma-u2", "0.2", "-o", str(tmp_path / "o.csv")])
    assert code == 2
    assert "time-independent" in capsys.readouterr().err


def test_time_varying_fit_runs(tmp_path):
    rng = np.random.default_rng(3)
    n = 150
    subj = tmp_path / "s.csv"
    paths = tmp_path / "p.csv"
    with open(subj, "w") as fs, open(paths, "w") as fp:
        fs.write("id,entry_time,exit_time,event,stratum\n")
        fp.write("id,time,w\n")
        for i in range(n):
            t = float(rng.uniform(1, 5))
            fs.write(f"{i},0,{t},{int(rng.random() < 0.4)},1\n")
            fp.write(f"{i},0,{rng.normal()}\n{i},0.5,{rng.normal()}\n")
    out = tmp_path / "o.csv"
    assert main(["fit", "--subjects", str(subj), "--paths", str(paths), "--tau", "0",
                 "--methods", "Naive,RR1", "--sigma-u2", "0.2", "-o", str(out)]) == 0
    assert len(read_rows(out)) == 4


def test_rare_disease_warning_for_common_events(tmp_path):
    subj = write_subjects(tmp_path / "s.csv", base=1.0)
    with pytest.warns(RuntimeWarning, match="rare disease"):
        main(["fit", "--subjects", str(subj), "--tau", "0", "--methods", "RR1", "--sigma-u2", "0.2",
              "-o", str(tmp_path / "o.csv")])


def test_concordance_command(tmp_path):
    subj = write_subjects(tmp_path / "s.csv")
    out = tmp_path / "c.csv"
    assert main(["concordance", "--subjects", str(subj), "--tau", "0", "--methods", "Naive,RR1",
                 "--sigma-u2", "0.25", "-o", str(out)]) == 0
    rows = read_rows(out)
    assert [r["method"] for r in rows] == ["Naive", "RR1"]
    assert all(r["definition"] == "Harrell" for r in rows)


def scenario_file(path, k=3):
    scen = [{"n": 200, "beta0": 0.405, "omega0": 0.693, "reps": 2, "cum_incidence": 0.3,
             "rho_xw": rho, "methods": ["Naive", "RC1"]} for rho in (0.8, 0.6, 0.4)[:k]]
    path.write_text(json.dumps(scen))
    return path


def test_simulate_three_scenarios_and_determinism(tmp_path):
    scen = scenario_file(tmp_path / "scen.json")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--scenarios", str(scen), "--seed", "5", "-o", str(a)]) == 0
    assert main(["simulate", "--scenarios", str(scen), "--seed", "5", "-o", str(b)]) == 0
    for name in ("summary.csv", "replicates.csv", "boxplot_data.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = read_rows(a / "summary.csv")
    assert len({r["scenario"] for r in rows}) == 3
    assert len(rows) == 3 * 2 * 2


def test_simulate_rejects_duplicate_labels(tmp_path):
    scen = tmp_path / "scen.json"
    scen.write_text(json.dumps([{"beta0": 0.4, "omega0": 0.7}, {"beta0": 0.4, "omega0": 0.7}]))
    assert main(["simulate", "--scenarios", str(scen), "-o", str(tmp_path / "o")]) == 2


def test_bias_limit_command(tmp_path):
    out = tmp_path / "lim.csv"
    assert main(["bias-limit", "--methods", "Naive", "--rho", "1.0,0.8", "--tau-quantiles", "0.5",
                 "--cum-incidence", "0.5", "--mc-size", "20000", "-o", str(out)]) == 0
    rows = read_rows(out)
    assert len(rows) == 2
    assert abs(float(rows[0]["bias_beta"])) < 1e-6 and abs(float(rows[0]["bias_omega"])) < 1e-6
    assert float(rows[1]["bias_omega"]) < 0
    assert main(["bias-limit", "--methods", "MPPLE", "-o", str(out)]) == 2
    assert main(["bias-limit", "--tau-quantiles", "1.5", "-o", str(out)]) == 2


# FHS-like synthetic data: W ~ N(0.71, 0.045 + 0.013), tau = 0.182, outcomes drawn from
# a reference naive fit (beta -1.121, omega 3.055) with 31.33% events over 48 years
FHS_B, FHS_W, FHS_TAU, FHS_N, FHS_REPS = -1.121, 3.055, 0.182, 664, 30


@pytest.fixture(scope="module")
def fhs_fits(tmp_path_factory):
    from scipy import optimize

    tmp = tmp_path_factory.mktemp("fhs")
    sd = np.sqrt(0.045 + 0.013)

    def hazard(w):
        return np.exp(FHS_B * w + FHS_W * np.maximum(w - FHS_TAU, 0))
    big = hazard(0.71 + sd * np.random.default_rng(99).standard_normal(200_000))
    lam = optimize.brentq(lambda l: np.mean(-np.expm1(-48 * l * big)) - 0.3133, 1e-10, 10)
    rng = np.random.default_rng(2024)
    out = []
    for r in range(FHS_REPS):
        w = 0.71 + sd * rng.standard_normal(FHS_N)
        t = rng.exponential(1 / (lam * hazard(w)))
        subj = tmp / f"s{r}.csv"
        with open(subj, "w") as fh:
            fh.write("id,entry_time,exit_time,event,stratum,w\n")
            for i in range(FHS_N):
                fh.write(f"{i},0,{float(min(t[i], 48.0))!r},{int(t[i] <= 48)},1,{float(w[i])!r}\n")
        res = tmp / f"f{r}.csv"
        assert main(["fit", "--subjects", str(subj), "--tau", str(FHS_TAU), "-o", str(res)]) == 0
        rows = read_rows(res)
        out.append([float(rows[0]["estimate"]), float(rows[1]["estimate"]), float(rows[0]["se"]),
                     float(rows[1]["se"]), float(rows[1]["p_value"])])
    return np.array(out)


def test_fhs_like_sign_pattern(fhs_fits):
    signs = (fhs_fits[:, 0] < 0) & (fhs_fits[:, 1] > 0)
    assert signs.mean() > 0.5


def test_fhs_like_se_ratio(fhs_fits):
    ratio = np.median(fhs_fits[:, 3] / fhs_fits[:, 2])
    assert ratio == pytest.approx(1.328 / 1.200, rel=0.15)


def test_fhs_like_omega_significant(fhs_fits):
    # reference pattern: omega significant at the 5% level
    assert np.mean(fhs_fits[:, 4] < 0.05) > 0.5
