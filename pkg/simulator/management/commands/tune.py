import json
import os
from dataclasses import replace

import pandas as pd

from simulator.management.base import SimulatorCommand
from nvcim_pt.ml.experiment_harness import gen_workload, read_workload_jsonl, train_prompts
from nvcim_pt.ml.noise_aware_tuning import save_prompts, training_log_frame


def encoded_stem(directory, position, prompt_id):
    """Encoded prompts keep their programming order in the file name"""
    return os.path.join(directory, f"{position:04d}_{prompt_id}")


class Command(SimulatorCommand):
    help = 'Run training mode: stream a workload through the buffer and tune one prompt per representative'

    def add_command_arguments(self, parser):
        parser.add_argument('--workload', default=None,
                            help='Workload JSONL written by gen (default: generate one from the run seed)')
        parser.add_argument('--buffer-size', type=int, default=None, help='Buffer capacity B_s')
        parser.add_argument('--largest-cluster-only', action='store_true',
                            help='Keep only the representative of the largest cluster per flush')

    def run(self, options):
        cfg = self.pipeline_config(options)
        if options['buffer_size'] is not None:
            cfg = replace(cfg, buffer_size=options['buffer_size'])
        if options['largest_cluster_only']:
            cfg = replace(cfg, largest_cluster_only=True)

        if options['workload']:
            workload = read_workload_jsonl(options['workload'])
        else:
            workload = gen_workload(self.run_config(options).workload_for(cfg.seed))

        trained = train_prompts(workload, cfg)
        out = self.output_dir(options)

        save_prompts(trained.prompts, os.path.join(out, 'prompts.joblib'))
        trained.autoencoder.save(os.path.join(out, 'autoencoder.nvpt'))
        trained.task.save(os.path.join(out, 'task.joblib'))

        encoded_dir = os.path.join(out, 'encoded')
        os.makedirs(encoded_dir, exist_ok=True)
        for position, ep in enumerate(trained.encoded):
            ep.save(encoded_stem(encoded_dir, position, ep.source_id))

        with open(os.path.join(out, 'selection.json'), 'w') as f:
            json.dump({'method': cfg.method.label, 'buffer_size': cfg.buffer_size, 'rounds': trained.selections},
                      f, indent=2)

        if trained.prompts:
            logs = [training_log_frame(vts).assign(prompt_id=vts.id) for vts in trained.prompts]
            pd.concat(logs, ignore_index=True)[['prompt_id', 'step', 'loss']].to_csv(
                os.path.join(out, 'training_log.csv'), index=False)

        self.success(f"Tuned {len(trained.prompts)} prompts over {len(trained.selections)} buffer flushes "
                     f"({cfg.method.label}, sigma={cfg.sigma}); artifacts in {out}")
