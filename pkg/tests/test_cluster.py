import sys
import warnings

import pytest

from distreach.cluster import (ClusterConfig, ClusterConfigError, ClusterError, load_cluster_config,
                               parse_cluster_config, shutdown_cluster, spawn_cluster)
from distreach.coordinator import StopCriterion, TrainingAborted, train
from distreach.transport import MsgType

LISTING = """\
spec:
  replicas: 12
  ...
    spec:
      containers:
        - name: <container-name-preffix>
          image: <location-of-the-containerized-image>
          securityContext:
            privileged: true
          resources:
            limits:
              cpu: "4"
              memory: "3.8Gi"
            requests:
              cpu: "2.5"
              memory: "1.0Gi"
    ...
"""


class TestParse:
    def test_deployment_listing(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            cfg = parse_cluster_config(LISTING)
        assert (cfg.replicas, cfg.cpu_limit, cfg.memory_limit) == (12, "4", "3.8Gi")
        assert cfg.workers_per_replica == 1 and cfg.total_workers == 12

    def test_minimal(self):
        cfg = parse_cluster_config("replicas: 1\nworkers_per_replica: 1\n")
        assert cfg == ClusterConfig(1, 1)

    def test_flat_keys(self):
        cfg = parse_cluster_config("replicas: 2\nworkers_per_replica: 4\nmode: local-processes\n"
                                   "listen_address: 0.0.0.0:7000\ncpu: '4'\n")
        assert cfg.total_workers == 8 and cfg.mode == "local-processes" and cfg.cpu_limit == "4"

    def test_zero_replicas(self):
        with pytest.raises(ClusterConfigError):
            parse_cluster_config("replicas: 0\n")

    def test_missing_replicas(self):
        with pytest.raises(ClusterConfigError, match="replicas"):
            parse_cluster_config("workers_per_replica: 2\n")

    def test_too_many_per_replica(self):
        with pytest.raises(ClusterConfigError, match="at most 4"):
            parse_cluster_config("replicas: 1\nworkers_per_replica: 5\n")

    def test_unknown_key_warns(self):
        with pytest.warns(UserWarning, match="gpu"):
            cfg = parse_cluster_config("replicas: 1\ngpu: 2\n")
        assert cfg.replicas == 1

    def test_not_a_mapping(self):
        with pytest.raises(ClusterConfigError):
            parse_cluster_config("- 1\n- 2\n")
        with pytest.raises(ClusterConfigError):
            parse_cluster_config("replicas: [\n")

    def test_bad_mode(self):
        with pytest.raises(ClusterConfigError):
            ClusterConfig(1, mode="cloud")

    def test_load(self, tmp_path):
        (tmp_path / "c.yaml").write_text(LISTING)
        assert load_cluster_config(str(tmp_path / "c.yaml")).replicas == 12

    @pytest.mark.parametrize("n,shape", [(1, (1, 1)), (2, (1, 2)), (4, (1, 4)), (6, (2, 3)),
                                         (8, (2, 4)), (16, (4, 4)), (7, (7, 1))])
    def test_for_workers(self, n, shape):
        cfg = ClusterConfig.for_workers(n)
        assert (cfg.replicas, cfg.workers_per_replica) == shape and cfg.total_workers == n


class TestSpawn:
    def test_single(self, small_env, small_cfg):
        with spawn_cluster(ClusterConfig(1), small_env, small_cfg, 0) as c:
            assert list(c.channels) == [0]
        assert c._report == {0: "clean"}

    def test_eight_workers(self, small_env, small_cfg):
        c = spawn_cluster(ClusterConfig(2, 4), small_env, small_cfg, 0)
        assert sorted(c.workers) == list(range(8))
        assert shutdown_cluster(c) == {i: "clean" for i in range(8)}
        assert shutdown_cluster(c) is c._report

    def test_dead_worker_reported(self, small_env, small_cfg):
        c = spawn_cluster(ClusterConfig(1, 2), small_env, small_cfg, 0)
        c.channels[1].send(MsgType.PARAMS, b"junk")
        assert c.channels[1].recv(5).msg_type == MsgType.ERROR
        c.workers[1].thread.join(5)
        assert shutdown_cluster(c) == {0: "clean", 1: "exit 1"}

    def test_killed_process_reported(self, small_env, small_cfg):
        c = spawn_cluster(ClusterConfig(1, 2, mode="local-processes"), small_env, small_cfg, 0)
        c.workers[0].process.kill()
        c.workers[0].process.wait()
        report = shutdown_cluster(c)
        assert report[0] == "exit -9" and report[1] == "clean"

    def test_local_processes(self, small_env, small_cfg):
        c = spawn_cluster(ClusterConfig(1, 2, mode="local-processes", register_timeout=60), small_env,
                          small_cfg.replace(num_workers=2), 3)
        try:
            assert sorted(c.workers) == [0, 1]
            assert all(h.kind == "process" for h in c.workers.values())
            res = train(c, small_cfg, StopCriterion(0.0, max_rounds=1), 3)
            assert res.metrics.rows[0].timesteps == 128
        finally:
            report = shutdown_cluster(c)
        assert report == {0: "clean", 1: "clean"}

    def test_processes_match_threads(self, small_env, small_cfg):
        """Same seed, same result whichever transport carries the frames."""
        out = []
        for mode in ("in-process", "local-processes"):
            with spawn_cluster(ClusterConfig(1, 2, mode=mode), small_env, small_cfg, 5) as c:
                out.append(train(c, small_cfg, StopCriterion(0.0, max_rounds=1), 5).params.values.tobytes())
        assert out[0] == out[1]

    def test_killed_process_aborts_training(self, small_env, small_cfg):
        c = spawn_cluster(ClusterConfig(1, 2, mode="local-processes"), small_env,
                          small_cfg.replace(num_workers=2), 0)
        try:
            c.workers[1].process.kill()
            c.workers[1].process.wait()
            with pytest.raises(TrainingAborted, match="worker 1"):
                train(c, small_cfg, StopCriterion(0.0, max_rounds=2), 0, ack_timeout=10)
        finally:
            shutdown_cluster(c)

    def test_missing_binary(self, small_env, small_cfg):
        with pytest.raises(ClusterError, match="could not spawn worker 0"):
            spawn_cluster(ClusterConfig(1, 2, mode="local-processes"), small_env, small_cfg, 0,
                          worker_cmd=["/nonexistent/distreach-worker"])

    def test_worker_exits_before_registering(self, small_env, small_cfg):
        with pytest.raises(ClusterError, match="exited with status 7"):
            spawn_cluster(ClusterConfig(1, 1, mode="local-processes", register_timeout=30), small_env,
                          small_cfg, 0, worker_cmd=[sys.executable, "-c", "import sys; sys.exit(7)", "--"])

    def test_registration_timeout(self, small_env, small_cfg):
        with pytest.raises(ClusterError, match="0 of 1 workers registered"):
            spawn_cluster(ClusterConfig(1, 1, mode="remote", register_timeout=0.5), small_env, small_cfg, 0)
