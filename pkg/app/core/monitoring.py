"""
Monitoring and metrics collection for training and rendering stages.
Provides Prometheus-compatible metrics and per-stage timing statistics.
"""
import logging
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from prometheus_client import CollectorRegistry, Counter, Gauge, Histogram, generate_latest, write_to_textfile

logger = logging.getLogger(__name__)

REGISTRY = CollectorRegistry()

OPTIMIZER_STEPS = Counter(
    'nerfsr_optimizer_steps_total',
    'Total number of optimizer steps taken',
    ['stage'],  # fit, sync, residual, lora, sds, codec, denoiser
    registry=REGISTRY,
)

STAGE_DURATION = Histogram(
    'nerfsr_stage_duration_seconds',
    'Wall-clock duration of pipeline stages',
    ['stage'],
    buckets=(0.1, 0.5, 1, 5, 15, 60, 300, 900, 3600, float('inf')),
    registry=REGISTRY,
)

LAST_LOSS = Gauge(
    'nerfsr_last_loss',
    'Most recent loss value reported by a stage',
    ['stage'],
    registry=REGISTRY,
)

NUMERICAL_ABORTS = Counter(
    'nerfsr_numerical_aborts_total',
    'Number of runs aborted on non-finite values or divergence',
    ['stage'],
    registry=REGISTRY,
)


@dataclass
class StageStats:
    count: int = 0
    total: float = 0.0
    fastest: float = float('inf')
    slowest: float = 0.0
    errors: int = 0

    def add(self, duration: float, failed: bool) -> None:
        self.count += 1
        self.total += duration
        self.fastest = min(self.fastest, duration)
        self.slowest = max(self.slowest, duration)
        self.errors += int(failed)

    def summary(self) -> dict:
        return {
            'count': self.count,
            'avg_duration_s': round(self.total / self.count, 3) if self.count else 0.0,
            'min_duration_s': round(self.fastest, 3) if self.count else 0.0,
            'max_duration_s': round(self.slowest, 3),
            'errors': self.errors,
        }


class MetricsCollector:
    """In-process stage timings, kept next to the Prometheus registry for the end-of-run log line."""

    def __init__(self, keep_slowest: int = 10):
        self.stages: dict[str, StageStats] = defaultdict(StageStats)
        self.slowest: list[dict] = []
        self.keep_slowest = keep_slowest

    def record_stage(self, stage: str, duration: float, failed: bool = False) -> None:
        self.stages[stage].add(duration, failed)
        self.slowest.append({'stage': stage, 'duration': duration, 'timestamp': time.time()})
        self.slowest.sort(key=lambda item: item['duration'], reverse=True)
        del self.slowest[self.keep_slowest:]

    def get_stats(self) -> dict:
        return {stage: stats.summary() for stage, stats in self.stages.items()}

    def reset(self) -> None:
        self.stages.clear()
        self.slowest.clear()


metrics_collector = MetricsCollector()


@contextmanager
def stage_timer(stage: str) -> Iterator[dict]:
    """Times a stage; the yielded dict receives ``duration`` once the block exits."""
    record: dict = {}
    start = time.perf_counter()
    failed = False
    try:
        yield record
    except Exception:
        failed = True
        raise
    finally:
        duration = time.perf_counter() - start
        record['duration'] = duration
        STAGE_DURATION.labels(stage=stage).observe(duration)
        metrics_collector.record_stage(stage, duration, failed=failed)
        if duration > 300:
            logger.warning("Slow stage: %s took %.1fs", stage, duration)


def record_step(stage: str, loss: float | None = None) -> None:
    OPTIMIZER_STEPS.labels(stage=stage).inc()
    if loss is not None:
        LAST_LOSS.labels(stage=stage).set(loss)


def record_abort(stage: str) -> None:
    NUMERICAL_ABORTS.labels(stage=stage).inc()


def get_metrics() -> bytes:
    """Get Prometheus metrics in text format."""
    return generate_latest(REGISTRY)


def write_metrics(path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)


def get_stage_stats():
    """Get summary statistics per stage."""
    stats = metrics_collector.get_stats()
    return {
        'stages': stats,
        'slow_stages': list(metrics_collector.slowest),
        'summary': {
            'total_executions': sum(s['count'] for s in stats.values()),
            'total_errors': sum(s['errors'] for s in stats.values()),
        }
    }
