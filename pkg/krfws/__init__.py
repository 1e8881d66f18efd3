__version__ = "0.1.0"


from krfws.wrappers import train_apr
from krfws.wrappers import train_3dapr
from krfws.wrappers import train_lbf
from krfws.wrappers import train_pose
from krfws.wrappers import evaluate
from krfws.wrappers import predict
from krfws.wrappers import synth_bench
from krfws.train_tools import TrainPipeline
from krfws.pose_tools import HeadPoseExperiment
from krfws.bench_tools import SynthBench
