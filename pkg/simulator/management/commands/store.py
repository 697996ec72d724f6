import glob
import os

from simulator.management.base import SimulatorCommand
from nvcim_pt.ml.experiment_harness import build_store
from nvcim_pt.ml.exceptions import StateError
from nvcim_pt.ml.prompt_codec import EncodedPrompt


class Command(SimulatorCommand):
    help = 'Program encoded prompts into the crossbar store and persist it'

    def add_command_arguments(self, parser):
        parser.add_argument('--encoded', default=None, help='Directory of encoded prompts (default: <out>/encoded)')
        parser.add_argument('--store-dir', default=None, help='Store destination (default: <out>/store)')

    def run(self, options):
        cfg = self.pipeline_config(options)
        out = self.output_dir(options)
        encoded_dir = options['encoded'] or os.path.join(out, 'encoded')
        if not os.path.isdir(encoded_dir):
            raise StateError(f"No encoded prompts at {encoded_dir}; run tune first")

        stems = sorted(path[:-len('.json')] for path in glob.glob(os.path.join(encoded_dir, '*.json')))
        encoded = [EncodedPrompt.load(stem) for stem in stems]
        store = build_store(encoded, cfg)

        store_dir = options['store_dir'] or os.path.join(out, 'store')
        store.save(store_dir)
        counters = store.counters.as_dict()
        self.success(f"Programmed {len(store)} prompts into {len(store.subarrays)} subarrays "
                     f"({counters['cell_writes']} cell writes, deviation RMS {store.write_deviation_rms():.4f}); "
                     f"saved to {store_dir}")
