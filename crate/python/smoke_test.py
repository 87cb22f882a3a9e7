"""Exercises the latmesh extension end to end: config, frames, stats and a
short virtual cluster run."""

import json
import math
import sys
import tempfile

import latmesh

CONFIG = {
    "round_rate_hz": 100,
    "payload_bytes": 1024,
    "duration_s": 60,
    "nodes": [
        {"id": i, "alias": f"n{i}", "data_address": f"10.0.0.{i}:7000",
         "control_address": f"10.0.0.{i}:7001",
         "cloud": "aws", "region": "eu-west-1", "az": az, "subnet": sn}
        for i, az, sn in [(1, "a", "s1"), (2, "a", "s1"), (3, "a", "s2"),
                          (4, "b", "s3"), (5, "c", "s4"), (6, "c", "s4"),
                          (7, "b", "s3"), (8, "a", "s1")]
    ],
}


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    cfg = latmesh.Config.from_json(json.dumps(CONFIG))
    check(cfg.node_ids == list(range(1, 9)), "node ids")
    check(cfg.estimate_traffic() == 1_638_400, "traffic estimate")
    check(cfg.classify(1, 2) == "same-subnet", "same subnet")
    check(cfg.classify(1, 3) == "cross-subnet", "cross subnet")
    check(cfg.classify(1, 4) == "cross-az", "cross az")
    check(len(cfg.digest()) == 64, "digest")

    frame = latmesh.encode_probe(7, 42, b"abc")
    check(len(frame) == 4 + latmesh.HEADER_LEN + 3, "probe frame length")
    msg = latmesh.decode_frame(frame)
    check(msg["kind"] == "probe" and msg["round"] == 42 and msg["payload"] == b"abc", "probe round trip")
    echo = latmesh.decode_frame(latmesh.encode_echo(3, 7, 42, b"abc"))
    check(echo["responder"] == 3 and echo["origin_sender"] == 7, "echo round trip")
    try:
        latmesh.decode_frame(frame[:-1])
        check(False, "truncated frame rejected")
    except ValueError:
        check(True, "truncated frame rejected")

    samples = list(range(1, 101))
    check(latmesh.percentile(samples, 99) == 99, "percentile")
    s = latmesh.summarize(samples)
    check(s["median"] == 50 and s["max"] == 100 and s["count"] == 100, "summary")
    check(latmesh.quorum_latency([30, 10, 20], 2) == 20, "quorum latency")
    check(latmesh.quorum_latency([30], 2) is None, "quorum shortfall")
    t, p, df = latmesh.two_sample_t([1.0, 2.0, 3.0, 4.0], [11.0, 12.0, 13.0, 14.0])
    check(t < 0 and p < 0.001 and df == 6, "t-test")

    model = json.dumps({"seed": 0, "default": {"base_delay_us": 1000}, "links": []})
    check(latmesh.sample_delay(model, 1, 2, 0) == 1000, "link model")

    loop = latmesh.Config.loopback(3, 100.0, 2.0)
    with tempfile.TemporaryDirectory() as out:
        ds, statuses = latmesh.run_virtual_cluster(loop, 2.0, out, model)
        check(len(statuses) == 3 and all(st["losses"] == 0 for st in statuses), "cluster statuses")
        sent = sum(st["probes_sent"] for st in statuses)
        check(len(ds) == sent, f"every probe observed ({len(ds)})")
        peer = ds.samples(pair=(1, 2))
        check(min(peer) >= 2000, f"injected delay visible (min {min(peer)} us)")
        check("same-subnet" in ds.report_csv(), "report")
        series = ds.window_series(1.0)
        total = sum(n for _, _, n in series)
        weighted = sum(m * n for _, m, n in series) / total
        plain = sum(r[4] for r in ds.rows()) / len(ds)
        check(math.isclose(weighted, plain, rel_tol=1e-9), "window series identity")
        qs, rounds, short = ds.quorum_series(1, [1, 2, 3], 2)
        check(len(qs) == len(rounds) and short == 0, "quorum series")
        again = latmesh.Dataset.load_dir(out, loop)
        check(len(again) == len(ds), "reload from disk")
    print("all good")


if __name__ == "__main__":
    main()
