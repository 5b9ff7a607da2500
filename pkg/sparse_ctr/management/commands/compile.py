from sparse_ctr.checkpoint import load_checkpoint, save_checkpoint
from sparse_ctr.pruning import sparsity_report
from sparse_ctr.sparse_infer import compile_sparse, write_model_card

from ._base import CtrCommand


class Command(CtrCommand):
    help = 'Compila un checkpoint podado a estructuras dispersas (CRS) y escribe su ficha'

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', help='Checkpoint de entrada (por defecto paths.checkpoint)')
        parser.add_argument('--output', help='Checkpoint disperso (por defecto <checkpoint>.sparse)')
        parser.add_argument('--card', help='Ficha del modelo (por defecto <output>.card.txt)')

    def command_overrides(self, options):
        return {'paths.checkpoint': options['checkpoint']}

    def run(self, run_config, options):
        run_config.require_paths(must_exist=['checkpoint'])
        source = run_config['paths.checkpoint']
        output = options['output'] or f'{source}.sparse'
        card = options['card'] or f'{output}.card.txt'

        loaded = load_checkpoint(source)
        params = loaded.dense_params()
        model = compile_sparse(params)
        echo = run_config.echo_lines()
        save_checkpoint(model, output, dictionary_hash=loaded.dictionary_hash, config_echo=echo)
        write_model_card(model, card, echo)

        report = sparsity_report(params)
        nnz = model.nnz_report()
        self.stdout.write(f'dnn: {nnz["dnn"]} no-ceros, esparsidad {report.dnn.sparsity:.2%}')
        self.stdout.write(f'R: {nnz["R"]} pares, esparsidad {report.field_matrix.sparsity:.2%}')
        self.stdout.write(f'embeddings: {nnz["emb"]} no-ceros, esparsidad {report.embeddings.sparsity:.2%}')
        self.stdout.write(self.style.SUCCESS(f'Modelo compilado en {output} (ficha: {card})'))
