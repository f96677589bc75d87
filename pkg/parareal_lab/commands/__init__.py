from .bench import cmd_bench
from .eval_nn import cmd_eval_nn
from .parareal import cmd_parareal
from .sample import cmd_sample
from .simulate import cmd_simulate
from .train import cmd_train

COMMANDS = {
    "sim": cmd_simulate,
    "parareal": cmd_parareal,
    "sample": cmd_sample,
    "train": cmd_train,
    "eval-nn": cmd_eval_nn,
    "bench": cmd_bench,
}
