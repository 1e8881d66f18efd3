from krfws.train_tools import TrainPipeline
from krfws.pose_tools import HeadPoseExperiment
from krfws.bench_tools import SynthBench
from krfws.evaluate_tools import NORMS


def _train(stage, main_dir, config, overrides, data, split, list_file, bbox_file, synthetic, n_jobs):
    x = TrainPipeline(main_dir=main_dir, config=config, overrides=overrides, n_jobs=n_jobs)
    faces = x.load_faces(data_root=data, split=split, list_file=list_file, bbox_file=bbox_file,
                         synthetic=synthetic)
    return x.train_stage(stage, faces)


def train_apr(main_dir=None, config=None, overrides=None, data=None, split="training",
              list_file=None, bbox_file=None, synthetic=None, n_jobs=None):
    return _train("apr", main_dir, config, overrides, data, split, list_file, bbox_file, synthetic, n_jobs)


def train_3dapr(main_dir=None, config=None, overrides=None, data=None, split="training",
                list_file=None, bbox_file=None, synthetic=None, n_jobs=None):
    return _train("apr3d", main_dir, config, overrides, data, split, list_file, bbox_file, synthetic, n_jobs)


def train_lbf(main_dir=None, config=None, overrides=None, data=None, split="training",
              list_file=None, bbox_file=None, synthetic=None, n_jobs=None):
    return _train("lbf", main_dir, config, overrides, data, split, list_file, bbox_file, synthetic, n_jobs)


def train_pose(main_dir=None, config=None, overrides=None, data=None, bbox_file=None, folds=None,
               synthetic=None, n_jobs=None):

    x = HeadPoseExperiment(main_dir=main_dir, config=config, overrides=overrides, n_jobs=n_jobs)
    faces = x.load_faces(data_root=data, bbox_file=bbox_file, synthetic=synthetic)
    return x.run(faces, n_folds=folds)


def evaluate(main_dir=None, config=None, overrides=None, data=None, split="full", list_file=None,
             bbox_file=None, norms=NORMS, predictions_dir=None, synthetic=None, n_jobs=None):

    x = TrainPipeline(main_dir=main_dir, config=config, overrides=overrides, n_jobs=n_jobs)
    faces, subsets = x.load_labeled_faces(data_root=data, split=split, list_file=list_file,
                                          bbox_file=bbox_file, synthetic=synthetic)
    return x.evaluate(faces, norms=norms, subsets=subsets, predictions_dir=predictions_dir,
                      label=f"eval_{split}")


def predict(main_dir=None, config=None, overrides=None, data=None, split="full", list_file=None,
            bbox_file=None, stages=None, synthetic=None, n_jobs=None):

    x = TrainPipeline(main_dir=main_dir, config=config, overrides=overrides, n_jobs=n_jobs)
    faces = x.load_faces(data_root=data, split=split, list_file=list_file, bbox_file=bbox_file,
                         synthetic=synthetic)
    return x.predict(faces, stages=stages)


def synth_bench(main_dir=None, config=None, overrides=None, stages=("apr", "apr3d", "lbf"), n_jobs=None):

    x = SynthBench(main_dir=main_dir, config=config, overrides=overrides, n_jobs=n_jobs)
    return x.run(stages=stages)
