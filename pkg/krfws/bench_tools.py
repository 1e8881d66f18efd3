from krfws.train_tools import TrainPipeline
from krfws.align_tools import PipelineBundle, mean_unit_shape
from krfws.evaluate_tools import normalized_error
from krfws.helpers import announce

import os

import numpy as np
import pandas as pd


class SynthBench(TrainPipeline):

    '''
    Trains the whole pipeline on synthetic faces and records the error of
    held-out faces after every stage.
    '''

    def __init__(self, main_dir=None, config=None, overrides=None, n_jobs=None):
        super().__init__(main_dir=main_dir, config=config, overrides=overrides, n_jobs=n_jobs)
        # the harness renders its own landmark scheme
        self.cfg["scheme"] = self.cfg["synth.scheme"]
        self.init_run_data["config"]["scheme"] = self.cfg["scheme"]

        self.stage_csv = os.path.join(self.reports_dir, "synth_stages.csv")
        self.image_csv = os.path.join(self.reports_dir, "synth_images.csv")

    def run(self, stages=("apr", "apr3d", "lbf"), save=True):

        '''
        Runs the benchmark.

        :stages:
            Stages to train and evaluate, in pipeline order.
        :save:
            If True, the model bundle and CSV reports are written to main_dir.

        Returns:
            A pandas DataFrame with columns 'stage' and 'mean_error'
            (inter-pupil normalized, percent), one row per pipeline step
            starting with the initial shape.
        '''

        train = self.load_faces(split="training", synthetic=self.cfg["synth.count"])
        test = self.load_faces(split="test", synthetic=self.cfg["synth.test"])

        # start from an empty bundle, ignoring models of earlier runs
        bundle = PipelineBundle(scheme=self.cfg["scheme"], unit_mean=mean_unit_shape(train),
                                face_size=self.cfg["face.size"])
        for s in stages:
            bundle = self.train_stage(s, train, bundle=bundle, save=save, init_stages=stages)

        rows = []
        labels = None
        for f, trace in zip(test, self.align(test, bundle, stages, trace=True)):
            labels = [label for label, _ in trace]
            row = {"name": f.name}
            for label, S in trace:
                row[label] = normalized_error(S, f.shape, "inter-pupil", self.cfg["scheme"])
            rows.append(row)

        images = pd.DataFrame(rows, columns=["name"] + labels).sort_values("name")
        summary = pd.DataFrame({"stage": labels,
                                "mean_error": [float(images[c].mean()) for c in labels]})
        announce("Mean errors: " + ", ".join(f"{s} {e:.3f}" for s, e in zip(summary["stage"], summary["mean_error"])))

        if save:
            self.make_dirs()
            images.to_csv(self.image_csv, index=False)
            summary.to_csv(self.stage_csv, index=False)
            self.record_command("synth-bench", {"train_faces": len(train), "test_faces": len(test),
                                                "stages": list(stages)})
        return summary

    def stage_errors(self):

        '''
        Mean errors saved by a previous run, as a dictionary stage -> error.
        '''

        df = pd.read_csv(self.stage_csv)
        return dict(zip(df["stage"], np.asarray(df["mean_error"], dtype=np.float64)))
