import csv
import json
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binom

from latentmp import cli, experiment, serialize
from latentmp.config import ConfigError, ExperimentConfig, load_config, parse_config
from latentmp.policy import PolicyParams, initial_params
from latentmp.promp import Trajectory
from tests.test_mppca import make_random_model

SMALL_CONFIG = {
    "seed": 3,
    "n_demos": 40,
    "env": {"n_goal_clusters": 1, "cluster_std": 0.08, "success_radius": 0.06},
    "model": {"K": 1, "d_z": 4},
    "rl": {"n_per_iter": 10, "n_iterations": 2, "eval_episodes": 20,
           "gamma": 1.0, "chi": 0.2},
}


def write_config(tmp_path, obj=None, **overrides):
    obj = dict(obj or SMALL_CONFIG)
    obj.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(obj))
    return path


class TestConfig:
    def test_defaults_parse(self):
        cfg = parse_config({})
        assert cfg.model.K == 4
        assert cfg.rl.lampo.chi == 0.2

    def test_unknown_root_key_rejected(self):
        with pytest.raises(ConfigError, match="typo_key"):
            parse_config({"typo_key": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ConfigError, match="cluster_stdd"):
            parse_config({"env": {"cluster_stdd": 0.1}})

    def test_cluster_count_selection(self):
        cfg = parse_config({"env": {"n_goal_clusters": 2}})
        assert cfg.env.n_goal_clusters == 2

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)


class TestModelSerialization:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        model = make_random_model(rng)
        theta = initial_params(model)
        path = tmp_path / "model.json"
        serialize.save_model(path, model, theta)
        model2, theta2 = serialize.load_model(path)
        for a, b in ((model.pi, model2.pi), (model.Omega, model2.Omega),
                     (model.omega_bar, model2.omega_bar), (model.C, model2.C),
                     (model.c_bar, model2.c_bar), (model.sigma2, model2.sigma2),
                     (model.mu, model2.mu), (model.Sigma_diag, model2.Sigma_diag),
                     (theta.logits, theta2.logits), (theta.mu, theta2.mu),
                     (theta.log_var, theta2.log_var)):
            np.testing.assert_array_equal(a, b)

    def test_version_check(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text(json.dumps({"format_version": 999}))
        with pytest.raises(ValueError, match="version"):
            serialize.load_model(path)


class TestDatasetSerialization:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(1)
        records = []
        for _ in range(5):
            times = np.sort(rng.uniform(0, 2, 20))
            times[0] = 0.0
            records.append((rng.normal(size=2),
                            Trajectory(times=times, positions=rng.normal(size=(20, 2)))))
        path = tmp_path / "demos.jsonl"
        serialize.write_dataset(path, records)
        loaded = serialize.read_dataset(path)
        assert len(loaded) == 5
        for (c1, t1), (c2, t2) in zip(records, loaded):
            np.testing.assert_array_equal(c1, c2)
            np.testing.assert_array_equal(t1.times, t2.times)
            np.testing.assert_array_equal(t1.positions, t2.positions)


class TestGenDemos:
    def test_identical_bytes_on_rerun(self, tmp_path):
        cfg = parse_config(dict(SMALL_CONFIG))
        p1 = experiment.cmd_gen_demos(cfg, tmp_path / "a")
        p2 = experiment.cmd_gen_demos(cfg, tmp_path / "b")
        assert p1.read_bytes() == p2.read_bytes()

    def test_record_count(self, tmp_path):
        cfg = parse_config(dict(SMALL_CONFIG))
        path = experiment.cmd_gen_demos(cfg, tmp_path)
        assert len(path.read_text().splitlines()) == cfg.n_demos

    def test_endpoints_reach_contexts(self, tmp_path):
        from latentmp.reacher import forward_kinematics
        cfg = parse_config(dict(SMALL_CONFIG))
        path = experiment.cmd_gen_demos(cfg, tmp_path)
        for c, traj in serialize.read_dataset(path):
            ee = forward_kinematics(traj.positions[-1])
            assert np.linalg.norm(ee - c) < cfg.env.success_radius


class TestImitate:
    def test_deterministic_model_file(self, tmp_path):
        cfg = parse_config(dict(SMALL_CONFIG))
        demos = experiment.cmd_gen_demos(cfg, tmp_path)
        m1 = experiment.cmd_imitate(cfg, demos, tmp_path / "a")
        m2 = experiment.cmd_imitate(cfg, demos, tmp_path / "b")
        assert m1.read_bytes() == m2.read_bytes()

    def test_single_cluster_imitation_quality(self, tmp_path):
        cfg = parse_config(dict(SMALL_CONFIG, n_demos=200,
                                rl=dict(SMALL_CONFIG["rl"], eval_episodes=100)))
        demos = experiment.cmd_gen_demos(cfg, tmp_path)
        model_path = experiment.cmd_imitate(cfg, demos, tmp_path)
        model, theta0 = serialize.load_model(model_path)
        summary = experiment.evaluate_policy(cfg, model, theta0, 100)
        assert summary.success_rate >= 0.5

    def test_components_specialize_to_clusters(self, tmp_path):
        from latentmp import mppca, promp
        cfg = parse_config({
            "seed": 5, "n_demos": 160,
            "env": {"n_goal_clusters": 4, "cluster_std": 0.08},
            "model": {"K": 4, "d_z": 4},
        })
        records = experiment.generate_demos(cfg)
        model, theta0, _ = experiment.imitate(cfg, records)
        # majority responsibility histogram: each goal cluster owned by one component
        owners = {}
        for c, traj in records:
            omega = promp.encode(traj, cfg.basis).to_vector()
            r = mppca.responsibilities(model, np.concatenate([omega, c]))
            cluster = int(np.argmin(np.linalg.norm(cfg.env.cluster_centers - c, axis=1)))
            owners.setdefault(cluster, []).append(int(np.argmax(r)))
        dominant = {cl: max(set(ks), key=ks.count) for cl, ks in owners.items()}
        assert sorted(dominant.values()) == [0, 1, 2, 3]
        for cl, ks in owners.items():
            assert ks.count(dominant[cl]) / len(ks) > 0.8


class TestImproveRun:
    @pytest.fixture(scope="class")
    def run_dir(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        cfg = parse_config(dict(SMALL_CONFIG))
        demos = experiment.cmd_gen_demos(cfg, out)
        experiment.cmd_imitate(cfg, demos, out)
        experiment.cmd_improve(cfg, out / "model.json", out)
        return cfg, out

    def test_csv_columns_and_rows(self, run_dir):
        cfg, out = run_dir
        with open(out / "learning_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == cfg.rl.n_iterations
        assert list(rows[0].keys()) == experiment.CSV_COLUMNS

    def test_trust_region_recomputable_from_snapshots(self, run_dir):
        from latentmp.offpolicy import trust_region
        cfg, out = run_dir
        dump = serialize.load_buffer_dump(out / "buffer.json")
        model, _ = serialize.load_model(out / "model.json")
        policy_index = np.array(dump["episodes"]["policy_index"])
        contexts = np.array(dump["episodes"]["contexts"])
        for rep in dump["iterations"]:
            t = rep["iteration"]
            prev = dump["policies"][t - 1]
            theta_prev = PolicyParams(np.array(prev["logits"]), np.array(prev["mu"]),
                                      np.array(prev["log_var"]))
            theta_after = PolicyParams.from_vector(
                np.array(rep["theta_after"]), model.n_components, model.d_z)
            cs = contexts[policy_index <= t - 1]
            g, _ = trust_region(model, theta_prev, theta_after, cs)
            if rep["accepted"]:
                assert g <= cfg.rl.lampo.chi + 1e-4

    def test_cache_in_dump_consistent(self, run_dir):
        from latentmp.policy import log_density_batch
        cfg, out = run_dir
        dump = serialize.load_buffer_dump(out / "buffer.json")
        model, _ = serialize.load_model(out / "model.json")
        eps = dump["episodes"]
        cache = np.array(dump["logdens"])
        for t, pol_obj in enumerate(dump["policies"]):
            theta = PolicyParams(np.array(pol_obj["logits"]), np.array(pol_obj["mu"]),
                                 np.array(pol_obj["log_var"]))
            fresh = log_density_batch(model, theta, np.array(eps["zs"]),
                                      np.array(eps["ks"]), np.array(eps["contexts"]))
            np.testing.assert_allclose(cache[:, t], fresh, atol=1e-10)

    def test_full_reproducibility_modulo_walltime(self, run_dir, tmp_path):
        cfg, out = run_dir
        out2 = tmp_path / "rerun"
        demos = experiment.cmd_gen_demos(cfg, out2)
        experiment.cmd_imitate(cfg, demos, out2)
        experiment.cmd_improve(cfg, out2 / "model.json", out2)
        with open(out / "learning_curve.csv") as fh:
            rows1 = list(csv.DictReader(fh))
        with open(out2 / "learning_curve.csv") as fh:
            rows2 = list(csv.DictReader(fh))
        for r1, r2 in zip(rows1, rows2):
            for col in experiment.CSV_COLUMNS:
                if col == "wall_time_s":
                    continue
                assert r1[col] == r2[col]


class TestEval:
    def test_binomial_ci_against_exact_quantiles(self):
        # oracle: Clopper-Pearson bounds invert the binomial CDF
        for n, k in ((50, 10), (100, 99), (30, 0), (30, 30), (200, 137)):
            lo, hi = experiment.binomial_ci(k, n)
            assert 0.0 <= lo <= hi <= 1.0
            if 0 < k:
                # P(X >= k | p = lo) = alpha/2
                assert binom.sf(k - 1, n, lo) == pytest.approx(0.025, abs=1e-6)
            if k < n:
                # P(X <= k | p = hi) = alpha/2
                assert binom.cdf(k, n, hi) == pytest.approx(0.025, abs=1e-6)

    def test_eval_deterministic(self, tmp_path):
        cfg = parse_config(dict(SMALL_CONFIG))
        records = experiment.generate_demos(cfg)
        model, theta0, _ = experiment.imitate(cfg, records)
        s1 = experiment.evaluate_policy(cfg, model, theta0, 30)
        s2 = experiment.evaluate_policy(cfg, model, theta0, 30)
        assert s1 == s2

    def test_random_policy_not_better_than_imitation(self, tmp_path):
        cfg = parse_config(dict(SMALL_CONFIG, n_demos=120))
        records = experiment.generate_demos(cfg)
        model, theta0, _ = experiment.imitate(cfg, records)
        rng = np.random.default_rng(0)
        random_theta = PolicyParams(
            logits=rng.normal(size=model.n_components),
            mu=rng.normal(scale=2.0, size=(model.n_components, model.d_z)),
            log_var=rng.normal(size=(model.n_components, model.d_z)),
        )
        il = experiment.evaluate_policy(cfg, model, theta0, 100)
        rnd = experiment.evaluate_policy(cfg, model, random_theta, 100)
        assert rnd.success_rate <= il.success_rate


class TestCli:
    def test_full_run_and_exit_codes(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, output_dir=str(tmp_path / "out"))
        assert cli.main(["full-run", "--config", str(cfg_path)]) == 0
        out = tmp_path / "out"
        assert (out / "demos.jsonl").exists()
        assert (out / "model.json").exists()
        assert (out / "learning_curve.csv").exists()
        assert (out / "model_final.json").exists()
        assert (out / "summary.json").exists()

    def test_bad_config_machine_parsable_error(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, bogus=1)
        assert cli.main(["gen-demos", "--config", str(cfg_path)]) == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert len(err.strip().splitlines()) == 1

    def test_missing_artifact_error(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, output_dir=str(tmp_path / "empty"))
        assert cli.main(["improve", "--config", str(cfg_path)]) == 1
        assert capsys.readouterr().err.startswith("error:")

    def test_seed_and_out_overrides(self, tmp_path):
        cfg_path = write_config(tmp_path, output_dir=str(tmp_path / "ignored"))
        assert cli.main(["gen-demos", "--config", str(cfg_path),
                         "--seed", "9", "--out", str(tmp_path / "o9")]) == 0
        assert (tmp_path / "o9" / "demos.jsonl").exists()
        assert not (tmp_path / "ignored").exists()
