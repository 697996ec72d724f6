import json
import os
from dataclasses import asdict

from django.conf import settings

from simulator.management.base import SimulatorCommand, parse_number_list
from nvcim_pt.ml.experiment_harness import sweep


class Command(SimulatorCommand):
    help = 'Run the full experiment grid (buffer sizes x sigmas x profiles x methods x seeds) and write the CSV report'

    sweeps = True

    def add_command_arguments(self, parser):
        parser.add_argument('--buffer-sizes', default=None, help='Comma-separated buffer sizes, e.g. 10,20,30')
        parser.add_argument('--sigmas', default=None, help='Comma-separated sigmas, e.g. 0.05,0.1')
        parser.add_argument('--profiles', default=None, help='Comma-separated device profiles, e.g. nvm-1,nvm-3')
        parser.add_argument('--methods', default=None, help='Comma-separated method presets or labels')
        parser.add_argument('--seeds', default=None, help='Comma-separated run seeds, e.g. 0,1,2')
        parser.add_argument('--n-jobs', type=int, default=None, help='Parallel cells (default: NVCIM_N_JOBS)')
        parser.add_argument('--timing', action='store_true', help='Append the wall_time column')
        parser.add_argument('--filename', default='sweep.csv', help='Report file name inside --out')

    def flag_document(self, options):
        doc = super().flag_document(options)
        if options.get('buffer_sizes'):
            doc['buffer_sizes'] = list(parse_number_list(options['buffer_sizes'], int))
        if options.get('sigmas'):
            doc['sigmas'] = list(parse_number_list(options['sigmas']))
        if options.get('profiles'):
            doc['profiles'] = list(parse_number_list(options['profiles'], str))
        if options.get('methods'):
            doc['methods'] = list(parse_number_list(options['methods'], str))
        if options.get('seeds'):
            doc['seeds'] = list(parse_number_list(options['seeds'], int))
        return doc

    def run(self, options):
        run_cfg = self.run_config(options)
        out = self.output_dir(options)
        n_jobs = options['n_jobs'] if options['n_jobs'] is not None else settings.NVCIM['N_JOBS']

        path = os.path.join(out, options['filename'])
        frame = sweep(run_cfg, path, n_jobs=n_jobs, timing=options['timing'])

        document = asdict(run_cfg)
        document['methods'] = [m.label for m in run_cfg.methods]
        document['pipeline']['method'] = run_cfg.pipeline.method.label
        with open(os.path.join(out, 'run_config.json'), 'w') as f:
            json.dump(document, f, indent=2)

        self.success(f"Wrote {len(frame)} rows to {path}")
