import os

from django.conf import settings

from sparse_ctr.bench import CSV_COLUMNS, bench_models, model_handle
from sparse_ctr.checkpoint import load_checkpoint
from sparse_ctr.data import EncodedDataset
from sparse_ctr.reports import write_csv

from ._base import CtrCommand
from .eval import check_dictionary

MAX_BENCH_SAMPLES = 1000


class Command(CtrCommand):
    help = 'Mide la latencia por muestra de uno o más checkpoints (densos o compilados)'

    def add_command_arguments(self, parser):
        parser.add_argument('checkpoints', nargs='+', help='Checkpoints a comparar')
        parser.add_argument('--dataset', help='Dataset codificado (por defecto paths.dataset)')
        parser.add_argument('--repetitions', type=int, help='Pasadas medidas (bench.repetitions)')
        parser.add_argument('--warmup', type=int, help='Pasadas sin medir (bench.warmup)')
        parser.add_argument('--threads', type=int, help='Hilos para la columna de throughput (qps)')
        parser.add_argument('--baseline', help='Nombre del modelo de referencia para el speedup')
        parser.add_argument('--output', help='CSV con una fila por modelo')

    def command_overrides(self, options):
        return {
            'paths.dataset': options['dataset'],
            'bench.repetitions': options['repetitions'],
            'bench.warmup': options['warmup'],
            'bench.threads': options['threads'],
        }

    def _names(self, paths):
        names = []
        for path in paths:
            name = os.path.basename(path)
            if name in names:
                name = f'{name}_{len(names)}'
            names.append(name)
        return names

    def run(self, run_config, options):
        run_config.require_paths(must_exist=['dataset'])
        dataset = EncodedDataset.load(run_config['paths.dataset'])
        part = dataset.test_part() if dataset.is_test.any() else dataset
        samples = [part.sample(i) for i in range(min(len(part), MAX_BENCH_SAMPLES))]

        handles = []
        for name, path in zip(self._names(options['checkpoints']), options['checkpoints']):
            loaded = load_checkpoint(path)
            check_dictionary(loaded, dataset, path)
            handles.append(model_handle(name, loaded.model))

        repetitions = run_config['bench.repetitions']
        if repetitions < settings.CTR_BENCH_MIN_REPETITIONS:
            self.stdout.write(
                self.style.WARNING(
                    f'Solo {repetitions} repeticiones: se recomiendan al menos '
                    f'{settings.CTR_BENCH_MIN_REPETITIONS} para cifras reportables'
                )
            )

        reports = bench_models(
            handles,
            samples,
            repetitions=repetitions,
            warmup=run_config['bench.warmup'],
            baseline_name=options['baseline'],
            threads=run_config['bench.threads'],
        )
        for report in reports:
            self.stdout.write(
                f'{report.model_name}: mediana {report.median_ms:.4f} ms, '
                f'p99 {report.p99_ms:.4f} ms, speedup {report.speedup:.2f}x'
            )
        if options['output']:
            write_csv(options['output'], [r.as_row() for r in reports], CSV_COLUMNS, run_config.echo_lines())
        self.stdout.write(self.style.SUCCESS(f'Benchmark completo ({len(reports)} modelos)'))
