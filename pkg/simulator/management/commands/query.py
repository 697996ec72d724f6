import os

from simulator.management.base import SimulatorCommand
from nvcim_pt.ml.exceptions import ConfigurationError, StateError
from nvcim_pt.ml.experiment_harness import read_workload_jsonl
from nvcim_pt.ml.nvcim_store import PromptStore
from nvcim_pt.ml.prompt_codec import LinearAutoencoder, VirtualTokenSet, encode


class Command(SimulatorCommand):
    help = 'Encode one query and retrieve the best stored prompt'

    def add_command_arguments(self, parser):
        parser.add_argument('--workload', required=True, help='Workload JSONL holding the query samples')
        parser.add_argument('--query-id', default=None, help='Query sample id (default: the first query)')
        parser.add_argument('--store-dir', default=None, help='Saved store (default: <out>/store)')
        parser.add_argument('--autoencoder', default=None, help='NVPT container (default: <out>/autoencoder.nvpt)')

    def run(self, options):
        cfg = self.pipeline_config(options)
        out = self.output_dir(options)
        store_dir = options['store_dir'] or os.path.join(out, 'store')
        if not os.path.isdir(store_dir):
            raise StateError(f"No store at {store_dir}; run store first")

        store = PromptStore.load(store_dir)
        ae = LinearAutoencoder.load(options['autoencoder'] or os.path.join(out, 'autoencoder.nvpt'))
        queries = read_workload_jsonl(options['workload']).queries
        if not queries:
            raise ConfigurationError(f"{options['workload']} holds no query samples")
        if options['query_id'] is None:
            query = queries[0]
        else:
            matching = [q for q in queries if q.id == options['query_id']]
            if not matching:
                raise ConfigurationError(f"No query with id '{options['query_id']}'")
            query = matching[0]

        e_query = encode(VirtualTokenSet(tokens=query.embedding, id=query.id), ae).data
        search = cfg.search_config()
        if cfg.method.retrieval == 'mips':
            match = store.retrieve_mips(e_query, search)
        else:
            match = store.retrieve(e_query, search)

        entry = store.entry(match.id)
        self.stdout.write(f"query={query.id} domain={query.domain_tag}")
        self.stdout.write(f"retrieved={match.id} domain={entry.domain_tag} score={match.score:.6g}")
        self.success(f"Domain {'matched' if entry.domain_tag == query.domain_tag else 'mismatched'} "
                     f"({cfg.method.retrieval} retrieval)")
