import json
import os

import pandas as pd

from simulator.management.base import SimulatorCommand
from nvcim_pt.ml.exceptions import ConfigurationError
from nvcim_pt.ml.experiment_harness import CONFIG_COLUMNS, spearman_trend, summarize


class Command(SimulatorCommand):
    help = 'Summarize a sweep CSV: mean metrics per configuration and accuracy trends over sigma'

    def add_command_arguments(self, parser):
        parser.add_argument('--input', default=None, help='Sweep CSV (default: <out>/sweep.csv)')
        parser.add_argument('--metric', default='retrieval_accuracy', help='Metric for the sigma trend')
        parser.add_argument('--save', action='store_true', help='Write summary.csv and trends.json to --out')

    def run(self, options):
        out = self.output_dir(options)
        path = options['input'] or os.path.join(out, 'sweep.csv')
        frame = pd.read_csv(path)
        missing = [c for c in CONFIG_COLUMNS + [options['metric']] if c not in frame.columns]
        if missing:
            raise ConfigurationError(f"{path} is not a sweep report (missing columns: {', '.join(missing)})")

        summary = summarize(frame)
        self.stdout.write(summary.to_string(index=False))

        # Trend of the metric over sigma, per profile, method and buffer size
        trends = []
        metric = options['metric']
        for (profile, method, buffer_size), group in summary.groupby(['profile', 'method', 'buffer_size'], sort=True):
            rho = spearman_trend(group['sigma'], group[metric])
            trends.append({'profile': profile, 'method': method, 'buffer_size': int(buffer_size),
                           'metric': metric, 'spearman': rho})
            self.stdout.write(f"{profile} {method} (B_s={buffer_size}): spearman({metric}, sigma) = {rho:+.3f}")

        if options['save']:
            summary.to_csv(os.path.join(out, 'summary.csv'), index=False)
            with open(os.path.join(out, 'trends.json'), 'w') as f:
                json.dump(trends, f, indent=2)

        self.success(f"Summarized {len(frame)} runs into {len(summary)} configurations")
