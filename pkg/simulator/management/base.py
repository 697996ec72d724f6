"""Shared plumbing of the simulator management commands

Every command accepts the same global flags and resolves its configuration as
settings.NVCIM defaults < --config JSON file < command-line flags. Library errors are
turned into command errors with fixed exit codes:
    2 argument error, 3 state error, 4 I/O error
"""

import json
import logging
import os
from dataclasses import replace

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from nvcim_pt.ml.exceptions import ConfigurationError, StateError
from nvcim_pt.ml.experiment_harness import RunConfig, get_method

logger = logging.getLogger(__name__)

EXIT_ARGUMENT_ERROR = 2
EXIT_STATE_ERROR = 3
EXIT_IO_ERROR = 4


def parse_number_list(raw, cast=float):
    """'1,2,4' -> (1, 2, 4)"""
    if raw is None:
        return None
    try:
        return tuple(cast(item.strip()) for item in str(raw).split(',') if item.strip())
    except ValueError as e:
        raise ConfigurationError(f"Cannot parse list '{raw}': {e}") from e


def default_run_document():
    """RunConfig document built from settings.NVCIM"""
    defaults = settings.NVCIM
    return {
        'buffer_sizes': list(defaults['BUFFER_SIZES']),
        'sigmas': list(defaults['SIGMAS']),
        'profiles': list(defaults['PROFILES']),
        'methods': list(defaults['METHODS']),
        'seeds': [defaults['SEED']],
        'pipeline': {
            'buffer_size': defaults['BUFFER_SIZE'],
            'sigma': defaults['SIGMA'],
            'seed': defaults['SEED'],
            'd_enc': defaults['D_ENC'],
            'bits_per_device': defaults['BITS_PER_DEVICE'],
            'tune_steps': defaults['TUNE_STEPS'],
            'tune_lr': defaults['TUNE_LR'],
            'scales': list(defaults['SCALES']),
            'weights': list(defaults['WEIGHTS']),
            'wv_tolerance': defaults['WRITE_VERIFY_TOLERANCE'],
            'wv_max_iters': defaults['WRITE_VERIFY_MAX_ITERS'],
        },
    }


def merge_documents(base, override):
    """Shallow merge, except nested 'workload' and 'pipeline' sections merge key by key"""
    merged = dict(base)
    for key, value in override.items():
        if key in ('workload', 'pipeline') and isinstance(value, dict):
            section = dict(merged.get(key, {}))
            section.update(value)
            merged[key] = section
        else:
            merged[key] = value
    return merged


class SimulatorCommand(BaseCommand):
    """Base class: global flags, configuration layering and exit-code mapping"""

    requires_system_checks = []
    # Sweep commands also narrow the sigma axis to --sigma
    sweeps = False

    def add_arguments(self, parser):
        parser.add_argument('--config', default=None, help='JSON file whose keys mirror RunConfig fields')
        parser.add_argument('--seed', type=int, default=None, help='Run seed (default: NVCIM_SEED)')
        parser.add_argument('--profile', default=None, help='Device profile: nvm-1..nvm-5, ideal, or a JSON file')
        parser.add_argument('--sigma', type=float, default=None, help='Relative device variation sigma')
        parser.add_argument('--scales', default=None, help='Comma-separated pooling scales, e.g. 1,2,4')
        parser.add_argument('--weights', default=None, help='Comma-separated scale weights, e.g. 1,0.8,0.6')
        parser.add_argument('--write-verify', action='store_true', help='Enable write-verify programming')
        parser.add_argument('--method', default=None,
                            help='Method preset (nvcim-pt, nvp-mips, no-miti-mips, swv, one4all) or ssa/mips')
        parser.add_argument('--noise-aware', choices=['on', 'off'], default=None, help='Noise-aware tuning')
        parser.add_argument('--out', default=None, help='Output directory (default: NVCIM_OUTPUT_DIR)')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            return self.run(options)
        except ConfigurationError as e:
            raise CommandError(f"Argument error: {e}", returncode=EXIT_ARGUMENT_ERROR) from e
        except StateError as e:
            raise CommandError(f"State error: {e}", returncode=EXIT_STATE_ERROR) from e
        except OSError as e:
            raise CommandError(f"I/O error: {e}", returncode=EXIT_IO_ERROR) from e

    def run(self, options):
        raise NotImplementedError

    def output_dir(self, options):
        out = options.get('out') or settings.NVCIM['OUTPUT_DIR']
        os.makedirs(out, exist_ok=True)
        return out

    def flag_document(self, options):
        doc = {'pipeline': {}}
        if options.get('seed') is not None:
            doc['seeds'] = [options['seed']]
            doc['pipeline']['seed'] = options['seed']
        if options.get('profile'):
            doc['profiles'] = [options['profile']]
        if options.get('sigma') is not None:
            if self.sweeps:
                doc['sigmas'] = [options['sigma']]
            doc['pipeline']['sigma'] = options['sigma']
        if options.get('scales'):
            doc['pipeline']['scales'] = list(parse_number_list(options['scales'], int))
        if options.get('weights'):
            doc['pipeline']['weights'] = list(parse_number_list(options['weights']))
        if options.get('method'):
            doc['methods'] = [options['method']]
        return doc

    def run_config(self, options):
        """Layered RunConfig: settings < --config file < flags"""
        doc = default_run_document()
        if options.get('config'):
            with open(options['config'], 'r') as f:
                try:
                    file_doc = json.load(f)
                except json.JSONDecodeError as e:
                    raise ConfigurationError(f"Config file {options['config']} is not valid JSON: {e}") from e
            if not isinstance(file_doc, dict):
                raise ConfigurationError(f"Config file {options['config']} must hold a JSON object")
            doc = merge_documents(doc, file_doc)
        doc = merge_documents(doc, self.flag_document(options))
        run_cfg = RunConfig.from_dict(doc)

        if options.get('noise_aware') is not None or options.get('write_verify'):
            def adjust(method):
                method = get_method(method)
                if options.get('noise_aware') is not None:
                    method = replace(method, noise_aware=options['noise_aware'] == 'on')
                if options.get('write_verify'):
                    method = replace(method, write_verify=True)
                return method
            run_cfg = replace(run_cfg, methods=tuple(adjust(m) for m in run_cfg.methods))
        return run_cfg

    def pipeline_config(self, options):
        """Single-run configuration: first profile, first method, first seed, pipeline sigma"""
        run_cfg = self.run_config(options)
        return replace(run_cfg.pipeline, profile=run_cfg.profiles[0], method=run_cfg.methods[0], seed=run_cfg.seeds[0])

    def success(self, message):
        self.stdout.write(self.style.SUCCESS(message))
