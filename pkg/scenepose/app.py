import argparse
import datetime
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from scenepose.config.run_config import RunConfig, load_config_file, parse_int_list
from scenepose.config.settings import get_device_name
from scenepose.models.pose_regressor import MultiScenePoseRegressor
from scenepose.services.attention_service import export_attention
from scenepose.services.augmentation_service import augment
from scenepose.services.benchmark_service import bench_scaling, write_bench_table
from scenepose.services.checkpoint_service import load_checkpoint
from scenepose.services.clustering_service import ClusteringService, centroid_file_digest, read_centroid_file
from scenepose.services.dataset_service import load_image, load_manifests, write_scene_map
from scenepose.services.evaluation_service import EvaluationService
from scenepose.services.report_service import write_pdf_report
from scenepose.services.synthetic_service import generate_synthetic
from scenepose.services.training_service import TrainingService, seed_everything

# Exit codes
SUCCESS_EXIT_CODE = 0
ERROR_EXIT_CODE = 1
USAGE_EXIT_CODE = 2

LOG_FORMAT = '%(asctime)s,%(msecs)d %(levelname)-8s [%(filename)s:%(lineno)d] %(message)s'
LOG_DATE_FORMAT = '%Y-%m-%d:%H:%M:%S'
DEFAULT_SCENE_COUNTS = [4, 10, 100, 1000]

logger = logging.getLogger(__name__)

REQUIRED_SETTINGS = {
    'synth': ('synthetic_scenes', 'per_scene'),
    'cluster': ('manifest',),
    'train': ('manifest', 'centroids'),
    'eval': ('checkpoint', 'manifest'),
    'attend': ('checkpoint',),
    'bench': (),
}

# argparse bookkeeping that is not a run setting
NON_SETTING_ARGS = ('command', 'config', 'verbose')


def configure_logging(verbose: bool = False):
    root = logging.getLogger()
    if root.handlers:
        for handler in list(root.handlers):
            root.removeHandler(handler)
    logging.basicConfig(format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT,
                        level=logging.DEBUG if verbose else logging.INFO)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', help='key=value config file; flags override its values')
    parser.add_argument('--output-dir', dest='output_dir',
                        help='output directory (default $SCENEPOSE_OUTPUT_ROOT/<command>, else ./runs/<command>)')
    parser.add_argument('--seed', type=int, help='random seed (default 0)')
    parser.add_argument('--verbose', action='store_true', help='log at DEBUG level')


def _add_model(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('model')
    group.add_argument('--backbone', choices=['reference', 'efficientnet_b0'], help='backbone (default efficientnet_b0)')
    group.add_argument('--input-size', dest='input_size', type=int, help='square input resolution')
    group.add_argument('--position-endpoint', dest='position_endpoint', type=int,
                       help='EfficientNet feature stage feeding the position branch (default 5)')
    group.add_argument('--orientation-endpoint', dest='orientation_endpoint', type=int,
                       help='EfficientNet feature stage feeding the orientation branch (default 3)')
    group.add_argument('--token-dim', dest='token_dim', type=int, help='transformer dimension C_d (default 256)')
    group.add_argument('--num-layers', dest='num_layers', type=int, help='encoder/decoder layers L (default 6)')
    group.add_argument('--num-heads', dest='num_heads', type=int, help='attention heads (default 4)')
    group.add_argument('--mlp-hidden-dim', dest='mlp_hidden_dim', type=int, help='transformer MLP width (default 256)')
    group.add_argument('--head-hidden-dim', dest='head_hidden_dim', type=int,
                       help='residual head hidden width (default 1024)')
    group.add_argument('--dropout', type=float, help='dropout rate (default 0.1)')
    group.add_argument('--shared-centroid-heads', dest='shared_centroid_heads', action='store_true', default=None,
                       help='share one centroid classifier per branch across scenes')


def _add_training(parser: argparse.ArgumentParser):
    group = parser.add_argument_group('training')
    group.add_argument('--epochs', type=int, help='training epochs (default 30)')
    group.add_argument('--batch-size', dest='batch_size', type=int, help='batch size (default 8)')
    group.add_argument('--lr', dest='learning_rate', type=float, help='initial learning rate (default 1e-4)')
    group.add_argument('--lr-halving-interval', dest='lr_halving_interval', type=int,
                       help='halve the learning rate every this many epochs (default 10)')
    group.add_argument('--checkpoint-interval', dest='checkpoint_interval', type=int,
                       help='write a checkpoint every this many epochs (0 = final only)')
    group.add_argument('--grad-clip', dest='grad_clip', type=float, help='gradient norm clip (default off)')
    group.add_argument('--init-s-x', dest='init_s_x', type=float, help='initial position balance term (default 0)')
    group.add_argument('--init-s-q', dest='init_s_q', type=float, help='initial orientation balance term (default -3)')
    group.add_argument('--num-workers', dest='num_workers', type=int, help='data loader workers (default 0)')
    group.add_argument('--resize', type=int, help='short edge before cropping')
    group.add_argument('--crop-size', dest='crop_size', type=int, help='crop size (default: the input size)')


def _add_device(parser: argparse.ArgumentParser):
    parser.add_argument('--device', help='torch device (default $SCENEPOSE_DEVICE, else cpu)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='scenepose', description='Multi-scene camera pose regression')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', help='generate a synthetic multi-scene dataset')
    _add_common(synth)
    synth.add_argument('--scenes', dest='synthetic_scenes', type=int, help='number of scenes')
    synth.add_argument('--per-scene', dest='per_scene', type=int, help='samples per scene')
    synth.add_argument('--image-size', dest='image_size', type=int, help='image side in pixels (default 64)')
    synth.add_argument('--test-fraction', dest='test_fraction', type=float,
                       help='fraction of each scene tagged test (default 0.25)')

    cluster = commands.add_parser('cluster', help='compute per-scene position/orientation centroids')
    _add_common(cluster)
    cluster.add_argument('--manifest', help='dataset manifest(s), comma-separated to merge several')
    cluster.add_argument('--kx', dest='num_position_clusters', type=int, help='position clusters K_x (default 4)')
    cluster.add_argument('--kq', dest='num_orientation_clusters', type=int, help='orientation clusters K_q (default 4)')
    cluster.add_argument('--out', help='centroid file (default <output-dir>/centroids.txt)')

    train = commands.add_parser('train', help='train a model')
    _add_common(train)
    train.add_argument('--manifest', help='dataset manifest(s), comma-separated to merge several')
    train.add_argument('--centroids', help='centroid file from `cluster`')
    train.add_argument('--kx', dest='num_position_clusters', type=int,
                       help='position clusters K_x (default: from the centroid file)')
    train.add_argument('--kq', dest='num_orientation_clusters', type=int,
                       help='orientation clusters K_q (default: from the centroid file)')
    _add_model(train)
    _add_training(train)
    _add_device(train)

    evaluate = commands.add_parser('eval', help='evaluate a checkpoint')
    _add_common(evaluate)
    evaluate.add_argument('--checkpoint', help='checkpoint from `train`')
    evaluate.add_argument('--manifest', help='dataset manifest(s), comma-separated to merge several')
    evaluate.add_argument('--centroids', help='centroid file; its hash must match the checkpoint')
    evaluate.add_argument('--split', choices=['train', 'test'], help='split to evaluate (default test)')
    evaluate.add_argument('--pdf', action='store_true', default=None, help='also write a PDF report')
    evaluate.add_argument('--batch-size', dest='eval_batch_size', type=int, help='inference batch size (default 8)')
    evaluate.add_argument('--coarse-only', dest='coarse_only', action='store_true', default=None,
                          help='report the selected centroids without residual refinement')
    _add_device(evaluate)

    attend = commands.add_parser('attend', help='export attention maps')
    _add_common(attend)
    attend.add_argument('--checkpoint', help='checkpoint from `train`')
    attend.add_argument('--manifest', help='take images from this manifest')
    attend.add_argument('--limit', type=int, help='number of manifest images (default 8)')
    attend.add_argument('--images', nargs='+', help='explicit image files')
    attend.add_argument('--layer', dest='attention_layer', type=int,
                        help='encoder/decoder layer to export, negative counts from the last (default -1)')
    _add_device(attend)

    bench = commands.add_parser('bench', help='forward runtime and size versus number of scenes')
    _add_common(bench)
    bench.add_argument('--scenes', dest='scene_counts', help='comma-separated scene counts (default 4,10,100,1000)')
    bench.add_argument('--layers', dest='layer_counts', help='comma-separated layer counts (default: --num-layers)')
    bench.add_argument('--trials', type=int, help='timed forward passes per row (default 20)')
    bench.add_argument('--warmup', type=int, help='untimed passes per row (default 3)')
    bench.add_argument('--kx', dest='num_position_clusters', type=int, help='position clusters K_x (default 4)')
    bench.add_argument('--kq', dest='num_orientation_clusters', type=int, help='orientation clusters K_q (default 4)')
    _add_model(bench)
    _add_device(bench)
    return parser


def initialize_run(args: argparse.Namespace) -> RunConfig:
    """Resolve file and flag settings, check required ones, and snapshot the result."""
    file_values = load_config_file(args.config) if args.config else {}
    flag_values = {k: v for k, v in vars(args).items() if k not in NON_SETTING_ARGS}
    cfg = RunConfig.resolve(args.command, file_values, flag_values)
    cfg.require(*REQUIRED_SETTINGS[args.command])
    cfg.write_snapshot()
    return cfg


def run_synth(cfg: RunConfig) -> Dict:
    dataset = generate_synthetic(
        num_scenes=int(cfg.get('synthetic_scenes')),
        samples_per_scene=int(cfg.get('per_scene')),
        image_size=int(cfg.get('image_size', 64)),
        seed=int(cfg.get('seed')),
        out_dir=cfg.output_dir,
        test_fraction=float(cfg.get('test_fraction', 0.25)),
    )
    return {'manifest': str(cfg.output_dir / 'manifest.txt'), 'samples': len(dataset), 'scenes': dataset.num_scenes}


def run_cluster(cfg: RunConfig) -> Dict:
    dataset = load_manifests(cfg.get('manifest'))
    out_path = Path(cfg.get('out') or cfg.output_dir / 'centroids.txt')
    service = ClusteringService(int(cfg.get('num_position_clusters', 4)),
                                int(cfg.get('num_orientation_clusters', 4)), int(cfg.get('seed')))
    centroid_sets = service.cluster(dataset.split('train').samples, out_path)
    return {'centroids': str(out_path), 'scenes': len(centroid_sets), 'sha256': centroid_file_digest(out_path)}


def run_train(cfg: RunConfig) -> Dict:
    dataset = load_manifests(cfg.get('manifest'))
    centroid_sets = read_centroid_file(cfg.get('centroids'))
    # K_x / K_q default to what the centroid file holds
    for centroid_set in list(centroid_sets.values())[:1]:
        cfg.values.setdefault('num_position_clusters', centroid_set.num_position_clusters)
        cfg.values.setdefault('num_orientation_clusters', centroid_set.num_orientation_clusters)
    model_config = cfg.model_config(num_scenes=dataset.num_scenes)
    train_config = cfg.train_config()
    augmentation = cfg.augmentation_config(model_config.backbone.input_size)

    seed_everything(train_config.seed)
    model = MultiScenePoseRegressor(model_config)
    write_scene_map(cfg.output_dir / 'scene_map.txt', dataset)
    result = TrainingService(train_config, augmentation).train(
        model, dataset.split('train').samples, centroid_sets, cfg.output_dir,
        centroid_hash=centroid_file_digest(cfg.get('centroids')))
    return {'checkpoint': str(result.checkpoint_path), 'steps': len(result.history), 'log': str(result.log_path)}


def run_eval(cfg: RunConfig) -> Dict:
    device = cfg.get('device') or get_device_name()
    loaded = load_checkpoint(cfg.get('checkpoint'), cfg.get('centroids'), device)
    dataset = load_manifests(cfg.get('manifest'))
    augmentation = cfg.augmentation_config(loaded.model.config.backbone.input_size)
    scene_names = [f"{dataset_id}/{name}" for dataset_id, name in dataset.scenes]
    service = EvaluationService(augmentation, int(cfg.get('eval_batch_size', 8)), device,
                                use_residuals=not cfg.get('coarse_only', False))
    report = service.evaluate(loaded.model, dataset.samples, loaded.centroid_sets, scene_names,
                              split=cfg.get('split', 'test'))
    outputs = {'report': str(report.write_yaml(cfg.output_dir / 'eval_report.yaml'))}
    if cfg.get('pdf'):
        outputs['pdf'] = str(write_pdf_report(report, cfg.output_dir / 'eval_report.pdf'))
    return outputs


def _attention_inputs(cfg: RunConfig) -> List[Path]:
    if cfg.get('images'):
        return [Path(p) for p in cfg.get('images')]
    cfg.require('manifest')
    samples = load_manifests(cfg.get('manifest')).samples
    return [Path(s.image_path) for s in samples[:int(cfg.get('limit', 8))]]


def run_attend(cfg: RunConfig) -> Dict:
    device = cfg.get('device') or get_device_name()
    loaded = load_checkpoint(cfg.get('checkpoint'), device=device)
    augmentation = cfg.augmentation_config(loaded.model.config.backbone.input_size)
    paths = _attention_inputs(cfg)
    images = torch.stack([augment(load_image(str(p)), augmentation, 'test') for p in paths]).to(device)
    names = [f"{i:04d}_{p.stem}" for i, p in enumerate(paths)]
    rankings = export_attention(loaded.model, images, cfg.output_dir / 'attention', names,
                                int(cfg.get('attention_layer', -1)))
    return {'images': len(rankings), 'ranking': str(cfg.output_dir / 'attention' / 'ranking.yaml')}


def run_bench(cfg: RunConfig) -> Dict:
    # per-scene centroid heads only via shared_centroid_heads=false in --config
    cfg.values.setdefault('shared_centroid_heads', True)
    template = cfg.model_config(num_scenes=1)
    scene_counts = parse_int_list(cfg.get('scene_counts', DEFAULT_SCENE_COUNTS), 'scene_counts')
    layer_counts = parse_int_list(cfg.get('layer_counts', template.num_layers), 'layer_counts')
    rows = bench_scaling(template, scene_counts, cfg.bench_config(), layer_counts,
                         device=cfg.get('device') or get_device_name(), seed=int(cfg.get('seed')))
    path = write_bench_table(cfg.output_dir / 'bench.csv', rows)
    return {'table': str(path), 'rows': len(rows)}


COMMANDS = {
    'synth': run_synth,
    'cluster': run_cluster,
    'train': run_train,
    'eval': run_eval,
    'attend': run_attend,
    'bench': run_bench,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, dispatch and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE_EXIT_CODE if e.code not in (0, None) else SUCCESS_EXIT_CODE

    configure_logging(args.verbose)
    start_time = datetime.datetime.now()
    logger.info(">>> START %s", args.command)

    try:
        cfg = initialize_run(args)
        outputs = COMMANDS[args.command](cfg)
        duration = (datetime.datetime.now() - start_time).total_seconds()
        logger.info(f"{args.command} completed in {duration:.1f}s: {outputs}")
        return SUCCESS_EXIT_CODE

    except KeyError as e:
        error_msg = f"Missing required configuration: {str(e)}"
        logger.error(error_msg)
        print(error_msg, file=sys.stderr)
        return ERROR_EXIT_CODE

    except ValueError as e:
        error_msg = f"Invalid input or configuration: {str(e)}"
        logger.error(error_msg)
        print(error_msg, file=sys.stderr)
        return ERROR_EXIT_CODE

    except Exception as e:
        error_msg = f"Unexpected error during execution: {str(e)}"
        logger.error(error_msg, exc_info=True)
        print(error_msg, file=sys.stderr)
        return ERROR_EXIT_CODE

    finally:
        logger.info("<<< END %s", args.command)


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
