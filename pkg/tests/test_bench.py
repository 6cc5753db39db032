import statistics

import pytest

from sonarnet.bench import (BENCH_COLUMNS, BenchReport, BenchRow, bench_scene, run_benchmark,
                            run_soak, time_process)
from sonarnet.errors import ArgumentError
from sonarnet.plot import bench_figure, image_figure, soak_figure
from sonarnet.synth import synthesize_measurement

PNG = b"\x89PNG\r\n\x1a\n"


def test_row_statistics():
    samples = [3.0, 5.0, 4.0, 10.0]
    r = BenchRow.from_samples("x", 9, samples)
    assert r.n == 4
    assert r.mean_ms == pytest.approx(5.5)
    assert r.std_ms == pytest.approx(statistics.stdev(samples))
    assert r.min_ms <= r.mean_ms <= r.max_ms
    assert BenchRow.from_samples("x", 9, [2.0]).std_ms == 0
    with pytest.raises(ArgumentError):
        BenchRow.from_samples("x", 9, [])


def fake_report():
    rows = [BenchRow("horizontal90", 90, 100, 20.0, 1.0, 18.0, 25.0),
            BenchRow("box1850", 1850, 100, 300.0, 5.0, 290.0, 320.0),
            BenchRow("hemisphere3000", 3000, 100, 600.0, 9.0, 580.0, 630.0)]
    return BenchReport(rows, "test cpu", 1, "2024-01-01T00:00:00")


def test_table_layout():
    lines = fake_report().to_table().splitlines()
    assert "n = 100" in lines[0]
    head = [c.strip() for c in lines[1].split("|")]
    assert head == ["Platform", "horizontal90 (90)", "box1850 (1850)", "hemisphere3000 (3000)"]
    cells = [c.strip() for c in lines[3].split("|")]
    assert cells == ["test cpu", "20.00 ms (1.00)", "300.00 ms (5.00)", "600.00 ms (9.00)"]


def test_csv_round_trip(tmp_path):
    rep = fake_report()
    text = rep.to_csv(tmp_path / "r.csv")
    assert text.splitlines()[0] == ",".join(BENCH_COLUMNS)
    back = BenchReport.from_csv(tmp_path / "r.csv")
    assert back.rows == rep.rows
    assert (back.hardware, back.workers, back.timestamp) == (rep.hardware, 1, rep.timestamp)


def test_figures_are_written(tmp_path, ws, boresight_measurement):
    bench_figure(fake_report(), tmp_path / "b.png")
    image_figure(ws.process(boresight_measurement), tmp_path / "i.png", max_range=2.0)
    for name in ("b.png", "i.png"):
        assert (tmp_path / name).read_bytes()[:8] == PNG


def test_time_process_discards_warmup(cfg, ws):
    ms = [synthesize_measurement(cfg, bench_scene().with_seed(k)) for k in range(3)]
    samples = time_process(ws, ms, warmup=1)
    assert len(samples) == 2 and all(s > 0 for s in samples)


def test_small_benchmark_run():
    seen = []
    rep = run_benchmark(["horizontal90", "box1850"], n=3, progress=seen.append)
    assert [r.config for r in rep.rows] == ["horizontal90", "box1850"]
    assert [r.directions for r in rep.rows] == [90, 1850]
    assert all(r.n == 3 for r in rep.rows)
    assert rep.row("box1850").mean_ms > rep.row("horizontal90").mean_ms
    assert seen == rep.rows
    with pytest.raises(ArgumentError):
        run_benchmark(n=0)


def test_slow_rate_soak_is_real_time(tmp_path):
    rep = run_soak(sensors=1, rate=1.0, duration=3.0, workers=1, variants=1)
    assert rep.expected == rep.delivered == 3
    assert rep.dropped == rep.sensor_drops == rep.gaps == 0
    assert rep.latency_percentiles()["p99"] < 1000.0
    summary = rep.summary()
    assert summary["delivered"] == 3 and summary["images_per_s"] > 0
    rep.to_csv(tmp_path / "s.csv")
    rep.latencies_to_csv(tmp_path / "lat.csv")
    soak_figure(rep, tmp_path / "s.png")
    assert (tmp_path / "s.png").read_bytes()[:8] == PNG
    assert len((tmp_path / "lat.csv").read_text().splitlines()) == 4
    assert "delivered" in rep.to_text()


def test_soak_argument_checks():
    with pytest.raises(ArgumentError):
        run_soak(sensors=0)
