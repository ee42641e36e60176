import numpy as np

from dualswin import bench
from dualswin.config import ModelConfig
from dualswin.model import DualSwinUnet


def tiny_model():
    cfg = ModelConfig(img_size=16, patch_size=4, embed_dim=8, encoder_depths=(2,),
                      decoder_depths=(2,), num_heads=(2, 2), window_size=2,
                      skip_connection_count=2)
    return DualSwinUnet(cfg, seed=0)


def test_benchmark_counts_and_stats():
    result = bench.run_benchmark(tiny_model(), iterations=12, warmup=3)
    assert result.times_s.shape == (12,)
    assert result.iterations == 12 and result.warmup == 3
    assert result.mean_s > 0
    assert result.p50_s <= result.p95_s
    assert abs(result.throughput - 1.0 / result.mean_s) < 1e-9
    assert result.param_count == tiny_model().parameter_count()


def test_report_contents():
    result = bench.run_benchmark(tiny_model(), iterations=5, warmup=1)
    report = bench.format_report(result)
    assert "forward pass only" in report
    assert "hardware = " in report and result.hardware in report
    assert "mean_s = " in report and "p95_s = " in report
    assert "throughput_per_s = " in report
    assert str(bench.REFERENCE_LATENCY_S) in report


def test_hardware_descriptor_mentions_platform():
    desc = bench.hardware_descriptor()
    assert "python" in desc and "numpy" in desc
