"""
Banco de latencia: pasadas de una sola muestra, densas o dispersas, con
reloj monotónico. La codificación y la E/S quedan fuera de la región medida.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from django.conf import settings

from .exceptions import ConfigError
from .networks import count_parameters, flops_estimate, forward
from .pruning import sparsity_report
from .sparse_infer import SparseModel, sparse_forward

logger = logging.getLogger(__name__)

CSV_COLUMNS = [
    'model_name', 'sparsity_dnn', 'sparsity_R', 'sparsity_emb',
    'mean_ms', 'median_ms', 'p99_ms', 'speedup', 'params_nnz', 'flops_est',
    'repetitions', 'warmup', 'qps', 'threads',
]


@dataclass(frozen=True)
class ModelHandle:
    """Lo que el banco necesita de un modelo: preparar la entrada y predecir"""
    name: str
    prepare: object
    predict: object
    sparsity: dict
    params_nnz: int
    flops: int


def model_handle(name, model):
    if isinstance(model, SparseModel):
        dense = model.densify()
        flops = model.sparse_flops()
        return ModelHandle(
            name=name,
            prepare=lambda sample: sample,
            predict=lambda sample: sparse_forward(sample, model),
            sparsity=sparsity_report(dense).ratios(),
            params_nnz=count_parameters(dense).total,
            flops=flops['shallow'] + flops['dnn'],
        )
    return ModelHandle(
        name=name,
        prepare=lambda sample: sample.to_batch(),
        predict=lambda batch: forward(batch, model),
        sparsity=sparsity_report(model).ratios(),
        params_nnz=count_parameters(model).total,
        flops=flops_estimate(model.config).total,
    )


@dataclass
class LatencyReport:
    model_name: str
    mean_ms: float
    median_ms: float
    p99_ms: float
    repetitions: int
    warmup: int
    sparsity: dict
    params_nnz: int
    flops_est: int
    speedup: float = 1.0
    baseline: str = ''
    qps: float = None
    threads: int = None

    def as_row(self):
        return {
            'model_name': self.model_name,
            'sparsity_dnn': self.sparsity.get('dnn', 0.0),
            'sparsity_R': self.sparsity.get('R', 0.0),
            'sparsity_emb': self.sparsity.get('emb', 0.0),
            'mean_ms': self.mean_ms,
            'median_ms': self.median_ms,
            'p99_ms': self.p99_ms,
            'speedup': self.speedup,
            'params_nnz': self.params_nnz,
            'flops_est': self.flops_est,
            'repetitions': self.repetitions,
            'warmup': self.warmup,
            'qps': self.qps,
            'threads': self.threads,
        }


def bench_latency(handle, samples, repetitions=1000, warmup=50, baseline=None):
    """
    Mide `repetitions` pasadas de una muestra tras `warmup` pasadas sin medir.
    Con `baseline` (otro LatencyReport) reporta la razón de medianas.
    """
    if repetitions < 1:
        raise ConfigError('repetitions debe ser >= 1')
    if warmup < 0:
        raise ConfigError('warmup debe ser >= 0')
    if not samples:
        raise ConfigError('el banco necesita al menos una muestra')
    if repetitions < settings.CTR_BENCH_MIN_REPETITIONS:
        logger.warning(
            '%s: %d repeticiones (< %d) no bastan para cifras reportables',
            handle.name, repetitions, settings.CTR_BENCH_MIN_REPETITIONS,
        )

    prepared = [handle.prepare(sample) for sample in samples]
    predict = handle.predict
    for i in range(warmup):
        predict(prepared[i % len(prepared)])

    timings = np.empty(repetitions, dtype=np.int64)
    clock = time.perf_counter_ns
    for i in range(repetitions):
        x = prepared[i % len(prepared)]
        started = clock()
        predict(x)
        timings[i] = clock() - started

    timings_ms = np.maximum(timings, 1) / 1e6
    report = LatencyReport(
        model_name=handle.name,
        mean_ms=float(timings_ms.mean()),
        median_ms=float(np.median(timings_ms)),
        p99_ms=float(np.percentile(timings_ms, 99)),
        repetitions=repetitions,
        warmup=warmup,
        sparsity=handle.sparsity,
        params_nnz=handle.params_nnz,
        flops_est=handle.flops,
    )
    if baseline is not None:
        report.speedup = baseline.median_ms / report.median_ms
        report.baseline = baseline.model_name
    logger.info(
        '%s: mediana %.4f ms, p99 %.4f ms, speedup %.2fx',
        report.model_name, report.median_ms, report.p99_ms, report.speedup,
    )
    return report


def bench_throughput(handle, samples, threads=1, repetitions=1000):
    """Muestras por segundo con `threads` hilos; se reporta aparte de la latencia"""
    if threads < 1:
        raise ConfigError('threads debe ser >= 1')
    if not samples:
        raise ConfigError('el banco necesita al menos una muestra')
    prepared = [handle.prepare(sample) for sample in samples]
    predict = handle.predict
    shares = [len(part) for part in np.array_split(np.arange(repetitions), threads)]

    def run(count):
        for i in range(count):
            predict(prepared[i % len(prepared)])
        return count

    started = time.perf_counter()
    with ThreadPoolExecutor(max_workers=threads) as executor:
        done = sum(executor.map(run, shares))
    elapsed = time.perf_counter() - started
    return done / elapsed if elapsed > 0 else float('inf')


def bench_models(handles, samples, repetitions=1000, warmup=50, baseline_name=None, threads=None):
    """Un LatencyReport por modelo; speedup relativo al modelo `baseline_name` (por defecto el primero)"""
    if not handles:
        raise ConfigError('se necesita al menos un modelo')
    names = [handle.name for handle in handles]
    baseline_name = baseline_name or names[0]
    if baseline_name not in names:
        raise ConfigError(f'baseline desconocido: {baseline_name}')

    reports = {handle.name: bench_latency(handle, samples, repetitions, warmup) for handle in handles}
    baseline = reports[baseline_name]
    for report in reports.values():
        report.speedup = baseline.median_ms / report.median_ms
        report.baseline = baseline_name
    if threads:
        for handle in handles:
            reports[handle.name].qps = bench_throughput(handle, samples, threads, repetitions)
            reports[handle.name].threads = threads
    return [reports[name] for name in names]
