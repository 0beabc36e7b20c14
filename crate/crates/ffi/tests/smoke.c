#include <stdio.h>
#include <string.h>
#include "cdnn.h"

int main(void) {
    CdnnMesh *mesh = NULL;
    if (cdnn_mesh_haar(4, 1, &mesh) != CDNN_STATUS_OK) return 1;
    double re[16], im[16], f = 0.0;
    if (cdnn_mesh_unitary(mesh, re, im) != CDNN_STATUS_OK) return 2;
    if (cdnn_mesh_fidelity(mesh, re, im, &f) != CDNN_STATUS_OK || f < 1.0 - 1e-12) return 3;
    cdnn_mesh_free(mesh);

    double bad_re[4] = {1, 1, 0, 1}, bad_im[4] = {0};
    if (cdnn_mesh_decompose(2, bad_re, bad_im, &mesh) != CDNN_STATUS_DATA) return 4;
    char msg[128];
    cdnn_last_error(msg, sizeof msg);
    if (strstr(msg, "not unitary") == NULL) return 5;

    if (cdnn_op_count(6, 3) != 240) return 6;
    printf("ok %s\n", cdnn_version());
    return 0;
}
