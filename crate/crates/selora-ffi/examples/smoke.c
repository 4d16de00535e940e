/* Minimal C consumer of the selora adapter ABI.
 *
 * Build (from the repository root):
 *   cargo build -p selora-ffi
 *   gcc -Wall -Wextra -I crates/selora-ffi/include \
 *       crates/selora-ffi/examples/smoke.c \
 *       target/debug/libselora_ffi.a -lpthread -ldl -lm -o smoke
 */
#include <assert.h>
#include <stdio.h>
#include <string.h>
#include "selora.h"

int main(void) {
    double w0[6] = {0.1, -0.2, 0.3, 0.4, -0.5, 0.6}; /* 3x2, row-major */
    double b0[2] = {0.05, -0.05};
    SeloraAdapter *h = NULL;
    assert(selora_adapter_new("demo", w0, b0, 3, 2, 7, &h) == SELORA_STATUS_OK);

    size_t d_in = 0, d_out = 0, rank = 0;
    assert(selora_adapter_dims(h, &d_in, &d_out) == SELORA_STATUS_OK);
    assert(d_in == 3 && d_out == 2);

    double x[3] = {1.0, 2.0, 3.0};
    double before[2], after[2];
    assert(selora_adapter_forward(h, x, 1, before) == SELORA_STATUS_OK);

    /* Rank growth never changes the computed function. */
    size_t new_rank = 0;
    assert(selora_adapter_expand(h, &new_rank) == SELORA_STATUS_OK);
    assert(new_rank == 2);
    assert(selora_adapter_forward(h, x, 1, after) == SELORA_STATUS_OK);
    assert(before[0] == after[0] && before[1] == after[1]);

    /* Failed calls leave a readable message. */
    assert(selora_adapter_rank(NULL, &rank) == SELORA_STATUS_NULL_ARGUMENT);
    assert(strlen(selora_last_error_message()) > 0);

    double merged[6];
    assert(selora_adapter_merge_weights(h, merged) == SELORA_STATUS_OK);
    selora_adapter_free(h);
    printf("smoke ok (selora %s, y = [%f, %f])\n",
           selora_version(), after[0], after[1]);
    return 0;
}
