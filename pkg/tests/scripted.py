"""A hand-written pick controller used to check that tasks are physically solvable."""

import numpy as np

from rma2.sim import forward_kinematics, tcp_jacobian


def pose_error(arm, q, target_xy, target_heading):
    pts, heading = forward_kinematics(arm, q)
    dxy = target_xy - pts[:, -1]
    dth = np.angle(np.exp(1j * (target_heading - heading)))
    return pts, dxy, dth


def ik_action(arm, state, target_xy, target_heading, aperture_cmd, gain=1.0):
    """Damped least-squares step toward a TCP pose, expressed as a normalized action."""
    q = state.joint_targets
    pts, dxy, dth = pose_error(arm, q, target_xy, target_heading)
    jac = tcp_jacobian(pts)
    full = np.concatenate([jac, np.ones((len(q), 1, arm.num_joints))], axis=1)  # heading row
    err = np.concatenate([dxy, dth[:, None]], -1)
    jt = full.transpose(0, 2, 1)
    dq = np.einsum("bij,bj->bi", jt @ np.linalg.inv(full @ jt + 1e-3 * np.eye(3)), err) * gain
    act = np.zeros((len(q), arm.dof))
    act[:, : arm.num_joints] = np.clip(dq / arm.joint_action_scale, -1, 1)
    act[:, -1] = np.clip((aperture_cmd - q[:, -1]) / arm.gripper_action_scale, -1, 1)
    return act


def grasp_heading(obj_pose, grasp_axis_local_angle, tcp_xy):
    """Heading whose closing axis lines up with the object's grasp axis, pointing away from the base."""
    axis = obj_pose[:, 2] + grasp_axis_local_angle
    h1 = axis - np.pi / 2
    h2 = axis + np.pi / 2
    base_dir = np.arctan2(obj_pose[:, 1], obj_pose[:, 0])
    d1 = np.abs(np.angle(np.exp(1j * (h1 - base_dir))))
    d2 = np.abs(np.angle(np.exp(1j * (h2 - base_dir))))
    return np.where(d1 < d2, h1, h2)
