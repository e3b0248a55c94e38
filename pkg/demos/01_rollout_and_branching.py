"""Walk through one denoising rollout and branch it from cached logits.

The policy fills a fully masked completion over T steps, committing the
highest-confidence tokens at each step.  Every intermediate state keeps
the logits rows computed during the rollout, so resampling alternative
actions at a past step costs zero extra forward passes.
"""

import argparse

from dispo.counters import OpCounters
from dispo.policy import LinearArch, init_params
from dispo.rollout import UnmaskSchedule, branch, rollout
from dispo.sequences import MaskedSequence
from dispo.streams import stream
from dispo.tasks import make_task


def show(seq: MaskedSequence) -> str:
    return "".join("_" if t == seq.vocab.mask_id else str(t) for t in seq.tokens)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    task = make_task("stringmatch", stream(args.seed, "demo-task"), 1, target_len=8, vocab_size=4)
    inst = task.instances[0]
    arch = LinearArch(task.vocab, task.prompt_len, task.completion_len, window=2)
    params = init_params(arch, stream(args.seed, "demo-params"), scale=0.5)

    n_steps = 4
    schedule = UnmaskSchedule(2)  # commit two tokens per step
    counters = OpCounters()
    traj = rollout(params, inst.prompt, n_steps, schedule, stream(args.seed, "demo-roll"), counters=counters)

    print(f"prompt     {show(inst.prompt)}   (the target to reproduce)")
    for t in range(1, n_steps + 1):
        committed = dict(traj.events[t - 1])
        print(f"step {t}: {show(traj.state_at(t).completion)} -> {show(traj.state_at(t + 1).completion)}   committed {committed}")
    final = traj.final_completion()
    print(f"terminal   {show(final)}   reward {inst.reward(inst.prompt, final):.3f}")
    print(f"rollout forward passes: {counters.rollout_forward_passes} (= T)")

    # branch at the middle step: four alternative fillings of the remaining
    # masks, all drawn from the logits the rollout already computed
    t_branch = 2
    state = traj.state_at(t_branch)
    print(f"\nbranching at step {t_branch}, state {show(state.completion)}:")
    for action, completed in branch(traj, t_branch, 4, stream(args.seed, "demo-branch")):
        reward = inst.reward(inst.prompt, completed)
        print(f"  action {action.to_dict()} -> {show(completed)}   reward {reward:.3f}")
    print(f"rollout forward passes after branching: {counters.rollout_forward_passes} (unchanged)")


if __name__ == "__main__":
    main()
