import logging

import pytest

from app.core import monitoring
from app.core.logging_config import RunIdFilter, run_context, run_id_var


def test_stage_timer_records_duration_and_errors():
    with monitoring.stage_timer("unit-ok") as timing:
        pass
    assert timing["duration"] >= 0.0
    with pytest.raises(RuntimeError):
        with monitoring.stage_timer("unit-fail"):
            raise RuntimeError("boom")
    stages = monitoring.get_stage_stats()["stages"]
    assert stages["unit-ok"]["errors"] == 0
    assert stages["unit-fail"]["errors"] == 1


def test_step_and_abort_counters(tmp_path):
    before = monitoring.REGISTRY.get_sample_value("nerfsr_optimizer_steps_total", {"stage": "unit"}) or 0.0
    monitoring.record_step("unit", 0.25)
    monitoring.record_step("unit")
    assert monitoring.REGISTRY.get_sample_value("nerfsr_optimizer_steps_total", {"stage": "unit"}) == before + 2
    assert monitoring.REGISTRY.get_sample_value("nerfsr_last_loss", {"stage": "unit"}) == 0.25
    monitoring.record_abort("unit")
    assert b"nerfsr_numerical_aborts_total" in monitoring.get_metrics()
    monitoring.write_metrics(tmp_path / "m" / "metrics.prom")
    assert "nerfsr_stage_duration_seconds" in (tmp_path / "m" / "metrics.prom").read_text()


def test_run_context_tags_records():
    record = logging.LogRecord("x", logging.INFO, __file__, 1, "msg", (), None)
    with run_context("abc123", "unit") as rid:
        assert rid == "abc123" and run_id_var.get() == "abc123"
        RunIdFilter().filter(record)
    assert record.run_id == "abc123"
    assert run_id_var.get() == "-"
    with pytest.raises(ValueError):
        with run_context(None, "unit"):
            raise ValueError("fails inside")
