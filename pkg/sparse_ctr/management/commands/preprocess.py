from sparse_ctr.data import (
    build_dictionary, encode_rows, read_tsv, save_dictionary, split_mask,
)

from ._base import CtrCommand


class Command(CtrCommand):
    help = 'Construye el diccionario de features y el dataset codificado a partir de un TSV'

    def add_command_arguments(self, parser):
        parser.add_argument('--input', help='TSV crudo (por defecto paths.data)')
        parser.add_argument('--dictionary', help='Salida del diccionario (por defecto paths.dictionary)')
        parser.add_argument('--dataset', help='Salida .npz (por defecto paths.dataset)')

    def command_overrides(self, options):
        return {
            'paths.data': options['input'],
            'paths.dictionary': options['dictionary'],
            'paths.dataset': options['dataset'],
        }

    def run(self, run_config, options):
        run_config.require_paths(must_exist=['data'], must_be_set=['dictionary', 'dataset'])
        schema = run_config.schema()
        data_path = run_config['paths.data']
        chunk_size = run_config['data.chunk_size']

        self.stdout.write('Contando frecuencias de tokens...')
        dictionary = build_dictionary(
            read_tsv(data_path, schema, chunk_size), schema, run_config['data.min_freq'],
        )

        self.stdout.write('Codificando muestras...')
        dataset = encode_rows(
            read_tsv(data_path, schema, chunk_size),
            dictionary,
            floor_log=run_config['data.floor_log'],
            clip_negative=run_config['data.clip_negative'],
        )
        dataset.is_test = split_mask(len(dataset), run_config['data.train_fraction'], run_config.seed)

        # Solo se escribe cuando todo el archivo ya fue leído sin errores
        save_dictionary(dictionary, run_config['paths.dictionary'], run_config.echo_lines())
        dataset.save(run_config['paths.dataset'])

        cardinalities = ','.join(str(c) for c in dictionary.field_cardinalities())
        self.stdout.write(f'm={dictionary.total_features}')
        self.stdout.write(f'n={schema.n_fields}')
        self.stdout.write(f'cardinalidades={cardinalities}')
        self.stdout.write(
            self.style.SUCCESS(
                f'{len(dataset)} muestras codificadas '
                f'({int((~dataset.is_test).sum())} train / {int(dataset.is_test.sum())} test)'
            )
        )
