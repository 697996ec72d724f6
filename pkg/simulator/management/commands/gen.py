import os
from dataclasses import replace

from simulator.management.base import SimulatorCommand
from nvcim_pt.ml.experiment_harness import gen_workload, write_workload_jsonl


class Command(SimulatorCommand):
    help = 'Generate a synthetic domain-clustered workload and write it as JSON lines'

    def add_command_arguments(self, parser):
        parser.add_argument('--num-domains', type=int, default=None, help='Number of domains')
        parser.add_argument('--samples-per-domain', type=int, default=None, help='Training samples per domain')
        parser.add_argument('--queries-per-domain', type=int, default=None, help='Held-out queries per domain')
        parser.add_argument('--warmup-per-domain', type=int, default=None, help='Autoencoder warm-up samples per domain')
        parser.add_argument('--dim', type=int, default=None, help='Token embedding dimension D')
        parser.add_argument('--num-tokens', type=int, default=None, help='Tokens per sample T')
        parser.add_argument('--separation', type=float, default=None, help='Domain separation (in within-domain std)')
        parser.add_argument('--filename', default='workload.jsonl', help='Output file name inside --out')

    def run(self, options):
        run_cfg = self.run_config(options)
        overrides = {
            'num_domains': options['num_domains'],
            'samples_per_domain': options['samples_per_domain'],
            'queries_per_domain': options['queries_per_domain'],
            'warmup_per_domain': options['warmup_per_domain'],
            'dim': options['dim'],
            'num_tokens': options['num_tokens'],
            'domain_separation': options['separation'],
            'seed': options['seed'],
        }
        spec = replace(run_cfg.workload, **{k: v for k, v in overrides.items() if v is not None})

        workload = gen_workload(spec)
        path = os.path.join(self.output_dir(options), options['filename'])
        write_workload_jsonl(workload, path)
        self.success(f"Wrote {len(workload.samples)} samples ({spec.num_domains} domains) to {path}")
