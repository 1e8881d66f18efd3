import os
import json
import platform

import numpy as np
import pandas as pd
import scipy
import sklearn
import cv2

import krfws
from krfws.config_tools import make_config


class RunBase():

    '''
    Base class establishing the directory structure of a run: trained
    models, reports and a json run manifest.
    '''

    def __init__(self, main_dir=None, config=None, overrides=None, n_jobs=None):

        '''
        :main_dir:
            The directory in which all outputs of the run are stored.
            If main_dir is None the current working directory will be used.
        :config:
            Name of a configuration file, or None for the defaults.
        :overrides:
            Dictionary of configuration values taking precedence over the file.
        :n_jobs:
            Number of worker threads; capped by the KRFWS_THREADS
            environment variable.
        '''

        if main_dir is None:
            self.main_dir = os.getcwd()
        else:
            self.main_dir = main_dir

        # the directory with trained model bundles
        self.model_dir = os.path.join(self.main_dir, "model")
        # the directory with CSV reports
        self.reports_dir = os.path.join(self.main_dir, "reports")
        # a json file recording the configuration and versions of a run
        self.run_manifest_jfile = os.path.join(self.main_dir, "run_manifest.json")

        self.config_file = config
        self.cfg = make_config(config, overrides)
        self.seed = self.cfg["seed"]
        self.n_jobs = n_jobs

        # initial structure of the data in the self.run_manifest_jfile file;
        # no timestamps, so that repeated runs give identical files
        self.init_run_data = {"config": {k: list(v) if isinstance(v, tuple) else v
                                         for k, v in sorted(self.cfg.items())},
                              "seed": self.seed,
                              "versions": self.versions(),
                              "commands": {}
                              }

    @staticmethod
    def versions():
        return {"krfws": krfws.__version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__,
                "pandas": pd.__version__,
                "opencv": cv2.__version__}

    def make_dirs(self):
        for d in (self.main_dir, self.model_dir, self.reports_dir):
            if not os.path.isdir(d):
                os.makedirs(d)

    # functions used to read and write data from/to the self.run_manifest_jfile file
    def get_run_data(self):
        if os.path.isfile(self.run_manifest_jfile):
            with open(self.run_manifest_jfile) as foo:
                return json.load(foo)
        else:
            return self.init_run_data

    def set_run_data(self, data):
        self.make_dirs()
        with open(self.run_manifest_jfile, 'w') as foo:
            json.dump(data, foo, sort_keys=True, indent=2)

    def record_command(self, command, info=None):

        '''
        Records a finished command in the run manifest, with the current
        configuration and package versions.

        :command:
            Name of the command.
        :info:
            Optional JSON-serializable dictionary stored with the command.
        '''

        data = self.get_run_data()
        data["config"] = self.init_run_data["config"]
        data["seed"] = self.seed
        data["versions"] = self.init_run_data["versions"]
        data["commands"][command] = info or {}
        self.set_run_data(data)
