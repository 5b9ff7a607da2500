import os

from django.core.management.base import BaseCommand, CommandError

from sparse_ctr.exceptions import CtrError
from sparse_ctr.synthetic import generate_planted


class Command(BaseCommand):
    help = 'Genera un TSV sintético estilo Criteo a partir de un FwFM conocido'

    def add_arguments(self, parser):
        parser.add_argument('output', help='Ruta del TSV a escribir')
        parser.add_argument('--rows', type=int, default=10_000, help='Número de filas')
        parser.add_argument('--fields', type=int, default=10, help='Número de campos')
        parser.add_argument('--numeric', type=int, default=0, help='Cuántos campos son numéricos')
        parser.add_argument('--cardinality', type=int, default=50, help='Tokens distintos por campo')
        parser.add_argument('--embed-dim', type=int, default=5, help='Dimensión de los embeddings plantados')
        parser.add_argument('--seed', type=int, default=2020, help='Semilla')
        parser.add_argument(
            '--force',
            action='store_true',
            help='Sobrescribir el archivo si ya existe'
        )

    def handle(self, *args, **options):
        output = options['output']
        if os.path.exists(output) and not options['force']:
            raise CommandError(f'{output} ya existe (use --force para sobrescribir)', returncode=2)

        self.stdout.write('Generando datos sintéticos...')
        try:
            planted = generate_planted(
                n_fields=options['fields'],
                n_numeric=options['numeric'],
                cardinality=options['cardinality'],
                embed_dim=options['embed_dim'],
                n_rows=options['rows'],
                seed=options['seed'],
            )
        except CtrError as exc:
            raise CommandError(str(exc), returncode=2) from exc
        planted.write_tsv(output)

        self.stdout.write(f'Campos numéricos: {planted.n_numeric}, categóricos: {planted.n_categorical}')
        self.stdout.write(f'CTR: {planted.labels.mean():.4f}')
        self.stdout.write(
            self.style.SUCCESS(f'{len(planted.rows)} filas escritas en {output}')
        )
